use rand::seq::index::sample;
use rand::Rng;

/// Random pool of `pool_size` candidates, then the `k` highest scores in it
/// (ties to the lower index), returned in that order.
pub fn mine_hard_negatives<R: Rng + ?Sized>(scores: &[f64], pool_size: usize, k: usize, rng: &mut R) -> Vec<usize> {
    let n = scores.len();
    if n < k {
        log::warn!("only {n} negative candidates for K = {k}; using all of them");
    }
    let mut pool: Vec<usize> = if pool_size >= n {
        (0..n).collect()
    } else {
        sample(rng, n, pool_size).into_vec()
    };
    pool.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    pool.truncate(k);
    pool
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn top_k_of_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = [0.1, 0.9, 0.5, 0.7, 0.2];
        assert_eq!(mine_hard_negatives(&s, 5, 3, &mut rng), vec![1, 3, 2]);
        assert_eq!(mine_hard_negatives(&[0.5, 0.5, 0.5], 3, 2, &mut rng), vec![0, 1]);
        assert_eq!(mine_hard_negatives(&s, 10, 8, &mut rng).len(), 5);
    }
}
