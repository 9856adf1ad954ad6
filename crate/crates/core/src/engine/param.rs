use super::tensor::{Shape5, Tensor5};
use crate::error::Result;

/// Whether batch norm uses batch statistics (and layers keep backward caches).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// A named tensor owned by a layer, with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    /// Running statistics are stored as non-trainable params.
    pub trainable: bool,
}

impl Param {
    pub fn new(shape: Vec<usize>, value: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![0.0; value.len()];
        Param {
            shape,
            value,
            grad,
            trainable: true,
        }
    }

    pub fn buffer(shape: Vec<usize>, value: Vec<f64>) -> Self {
        Param {
            trainable: false,
            ..Param::new(shape, value)
        }
    }

    pub fn from_tensor(t: Tensor5) -> Self {
        Param::new(t.shape().0.to_vec(), t.into_vec())
    }

    /// Views a 5-axis param as a tensor (copies).
    pub fn tensor(&self) -> Result<Tensor5> {
        let s: [usize; 5] = self.shape.clone().try_into().map_err(|_| {
            crate::error::Error::config(format!("param of shape {:?} is not 5-axis", self.shape))
        })?;
        Tensor5::from_vec(Shape5(s), self.value.clone())
    }

    pub fn accumulate(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.grad.len());
        for (a, b) in self.grad.iter_mut().zip(g) {
            *a += b;
        }
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Anything that owns named parameters.
pub trait Parameterized {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param));
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));

    fn zero_grad(&mut self) {
        self.visit_params_mut("", &mut |_, p| p.grad.fill(0.0));
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| {
            if p.trainable {
                n += p.value.len()
            }
        });
        n
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params("", &mut |name, _| names.push(name.to_string()));
        names
    }
}

/// A single-input, single-output differentiable layer.
pub trait Layer: Parameterized {
    fn forward(&mut self, x: &Tensor5, mode: Mode) -> Result<Tensor5>;
    /// Accumulates parameter gradients and returns the input gradient.
    fn backward(&mut self, grad_out: &Tensor5) -> Result<Tensor5>;
}

/// A parameter snapshot detached from its layer.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Copies every parameter (buffers included) out of `model` in visit order.
pub fn export_params(model: &dyn Parameterized, prefix: &str) -> Vec<NamedTensor> {
    let mut out = Vec::new();
    model.visit_params(prefix, &mut |name, p| {
        out.push(NamedTensor {
            name: name.to_string(),
            shape: p.shape.clone(),
            data: p.value.clone(),
        })
    });
    out
}

/// Loads the parameters of `model` whose names pass `select` from `tensors`.
/// Nothing is written unless every selected name is present with a matching
/// shape; otherwise the error lists each offending name.
pub fn import_params(
    model: &mut dyn Parameterized,
    tensors: &[NamedTensor],
    select: &dyn Fn(&str) -> bool,
) -> crate::error::Result<usize> {
    let by_name: std::collections::HashMap<&str, &NamedTensor> = tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let mut problems = Vec::new();
    model.visit_params("", &mut |name, p| {
        if !select(name) {
            return;
        }
        match by_name.get(name) {
            None => problems.push(format!("{name} (missing)")),
            Some(t) if t.shape != p.shape || t.data.len() != p.value.len() => {
                problems.push(format!("{name} (shape {:?}, expected {:?})", t.shape, p.shape))
            }
            Some(_) => {}
        }
    });
    if !problems.is_empty() {
        return Err(crate::error::Error::data(format!(
            "cannot load parameters: {}",
            problems.join(", ")
        )));
    }
    let mut copied = 0;
    model.visit_params_mut("", &mut |name, p| {
        if select(name) {
            p.value.copy_from_slice(&by_name[name].data);
            copied += 1;
        }
    });
    Ok(copied)
}
