use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::ModelConfig;
use crate::diffcore::{Float, Gradients, Tape, Tensor, Var};
use crate::error::{ensure, Error, Result};

/// Parameter groups: backbone, detection heads, rotation head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Group {
    Backbone,
    Detector,
    Rotation,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Backbone, Group::Detector, Group::Rotation];

    pub fn prefix(self) -> &'static str {
        match self {
            Group::Backbone => "f.",
            Group::Detector => "d.",
            Group::Rotation => "r.",
        }
    }

    pub fn of(name: &str) -> Option<Group> {
        Group::ALL.into_iter().find(|g| name.starts_with(g.prefix()))
    }
}

/// Backbone block (1-based) a parameter belongs to, from names like `f.b2.c1.w`.
pub fn backbone_block(name: &str) -> Option<usize> {
    name.strip_prefix("f.b")?.split('.').next()?.parse().ok()
}

/// All trainable tensors, keyed by unique names whose prefix (`f.`, `d.`,
/// `r.`) fixes the group.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

/// Every parameter the architecture defines, with its shape and init std.
fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, f64)> {
    let mut out = Vec::new();
    let mut conv = |name: String, cout: usize, cin: usize, k: usize, std: f64| {
        out.push((format!("{name}.w"), vec![cout, cin, k, k], std));
        out.push((format!("{name}.b"), vec![cout], 0.0));
    };
    let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
    let mut cin = 3;
    for (b, &c) in cfg.channels.iter().enumerate() {
        conv(format!("f.b{}.c1", b + 1), c, cin, 3, he(cin * 9));
        conv(format!("f.b{}.c2", b + 1), c, c, 3, he(c * 9));
        cin = c;
    }
    let a = cfg.anchors_per_cell();
    conv("d.rpn.conv".into(), cfg.rpn_channels, cin, 3, he(cin * 9));
    conv("d.rpn.obj".into(), 2 * a, cfg.rpn_channels, 1, 0.01);
    conv("d.rpn.delta".into(), 4 * a, cfg.rpn_channels, 1, 0.01);
    let pooled = cin * cfg.pool_size * cfg.pool_size;
    let mut fc = |name: &str, out_dim: usize, in_dim: usize, std: f64| {
        out.push((format!("{name}.w"), vec![out_dim, in_dim], std));
        out.push((format!("{name}.b"), vec![out_dim], 0.0));
    };
    fc("d.roi.fc1", cfg.roi_hidden, pooled, he(pooled));
    fc("d.roi.fc2", cfg.roi_hidden, cfg.roi_hidden, he(cfg.roi_hidden));
    fc("d.roi.cls", cfg.num_classes + 1, cfg.roi_hidden, 0.01);
    fc("d.roi.delta", 4, cfg.roi_hidden, 0.001);
    fc("r.fc", 4, pooled, 0.01);
    out
}

impl ModelParams<f32> {
    /// Fresh weights: He-normal for hidden layers, small normals for heads,
    /// zero biases.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let tensors = layout(cfg)
            .into_iter()
            .map(|(name, shape, std)| {
                let n: usize = shape.iter().product();
                let data = if std == 0.0 {
                    vec![0.0; n]
                } else {
                    let normal = Normal::new(0.0, std).expect("positive std");
                    (0..n).map(|_| normal.sample(rng) as f32).collect()
                };
                (name, Tensor::new(shape, data).expect("layout shapes are positive"))
            })
            .collect();
        ModelParams { tensors }
    }
}

impl<T: Float> ModelParams<T> {
    pub fn from_tensors(tensors: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        for name in tensors.keys() {
            ensure!(Group::of(name).is_some(), "parameter {name} has no group prefix");
        }
        Ok(ModelParams { tensors })
    }

    /// Checks that names and shapes match what `cfg` builds.
    pub fn check_layout(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = layout(cfg);
        if expected.len() != self.tensors.len() {
            return Err(Error::Config(format!(
                "parameter count {} does not match the configured architecture ({})",
                self.tensors.len(),
                expected.len()
            )));
        }
        for (name, shape, _) in expected {
            match self.tensors.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Config(format!(
                        "parameter {name} has shape {:?}, architecture expects {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Config(format!("parameter {name} is missing"))),
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn group(&self, group: Group) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.iter().filter(move |(n, _)| Group::of(n) == Some(group))
    }

    pub fn cast<U: Float>(&self) -> ModelParams<U> {
        ModelParams {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    /// SHA-256 over names, shapes, and exact element bits of one group.
    pub fn group_hash(&self, group: Group) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, t) in self.group(group) {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.as_f64().to_bits().to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Binds every tensor to `tape` as a leaf; gradients are tracked for the
    /// names `trainable` accepts.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| (name.clone(), tape.leaf(t.clone(), trainable(name))))
            .collect();
        Bound { vars }
    }
}

/// Tape handles for a bound [`ModelParams`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Handles for tensors already on a tape, keyed by parameter name.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Bound {
        Bound {
            vars: vars.into_iter().collect(),
        }
    }

    /// Panics when `name` is not part of the architecture; names are
    /// compile-time constants of the forward code.
    pub fn var(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    /// Extracts gradients for every tracked parameter (zeros when unreachable).
    pub fn gradients<T: Float>(&self, tape: &Tape<T>, grads: &mut Gradients<T>) -> BTreeMap<String, Vec<T>> {
        self.vars
            .iter()
            .filter(|(_, &v)| tape.requires_grad(v))
            .map(|(name, &v)| {
                let g = grads.take(v).unwrap_or_else(|| vec![T::zero(); tape.value(v).numel()]);
                (name.clone(), g)
            })
            .collect()
    }
}
