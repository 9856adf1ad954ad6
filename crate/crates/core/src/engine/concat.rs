use super::tensor::{Shape5, Tensor5};
use crate::error::{Error, Result};

/// Channels of `a` followed by channels of `b`.
pub fn concat_channels(a: &Tensor5, b: &Tensor5) -> Result<Tensor5> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.batch() != sb.batch() || sa.spatial() != sb.spatial() {
        return Err(Error::config(format!("concat_channels: {sa} and {sb} differ outside the channel axis")));
    }
    let shape = sa.with_channels(sa.channels() + sb.channels());
    let mut data = Vec::with_capacity(shape.numel());
    let (pa, pb) = (sa.channels() * sa.slab(), sb.channels() * sb.slab());
    for n in 0..sa.batch() {
        data.extend_from_slice(&a.data()[n * pa..(n + 1) * pa]);
        data.extend_from_slice(&b.data()[n * pb..(n + 1) * pb]);
    }
    Tensor5::from_vec(shape, data)
}

/// Inverse of [`concat_channels`]: the first `a_channels` channels and the rest.
pub fn split_channels(t: &Tensor5, a_channels: usize) -> Result<(Tensor5, Tensor5)> {
    let s = t.shape();
    if a_channels > s.channels() {
        return Err(Error::config(format!("split_channels: {a_channels} channels requested from {s}")));
    }
    let sa: Shape5 = s.with_channels(a_channels);
    let sb: Shape5 = s.with_channels(s.channels() - a_channels);
    let (pa, pb) = (sa.channels() * s.slab(), sb.channels() * s.slab());
    let mut da = Vec::with_capacity(sa.numel());
    let mut db = Vec::with_capacity(sb.numel());
    for n in 0..s.batch() {
        let base = n * (pa + pb);
        da.extend_from_slice(&t.data()[base..base + pa]);
        db.extend_from_slice(&t.data()[base + pa..base + pa + pb]);
    }
    Ok((Tensor5::from_vec(sa, da)?, Tensor5::from_vec(sb, db)?))
}
