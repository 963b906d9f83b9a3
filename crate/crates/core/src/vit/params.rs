use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::rng::StreamRng;
use crate::tensor::{Scalar, Tensor};

use super::EncoderConfig;

/// Named parameters, iterated in lexicographic name order.
pub type ParamSet<T = f32> = BTreeMap<String, Tensor<T>>;

const INIT_STD: f64 = 0.02;

fn trunc_normal(rng: &mut StreamRng, std: f64) -> f64 {
    loop {
        let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
        let u2: f64 = rng.random();
        let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

pub fn block_prefix(layer: usize) -> String {
    format!("blocks.{layer:02}")
}

/// Parameter names and shapes, in the order they are initialized.
pub fn param_shapes(cfg: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.embed_dim;
    let mut v = vec![
        ("cls_token".to_string(), vec![1, d]),
        ("mask_token".to_string(), vec![1, d]),
        ("pos_embed".to_string(), vec![cfg.num_patches() + 1, d]),
        ("patch_embed.weight".to_string(), vec![cfg.patch_dim(), d]),
        ("patch_embed.bias".to_string(), vec![d]),
    ];
    let hidden = d * cfg.mlp_ratio;
    for l in 0..cfg.depth {
        let p = block_prefix(l);
        v.extend([
            (format!("{p}.norm1.gain"), vec![d]),
            (format!("{p}.norm1.bias"), vec![d]),
            (format!("{p}.attn.qkv.weight"), vec![d, 3 * d]),
            (format!("{p}.attn.qkv.bias"), vec![3 * d]),
            (format!("{p}.attn.proj.weight"), vec![d, d]),
            (format!("{p}.attn.proj.bias"), vec![d]),
            (format!("{p}.norm2.gain"), vec![d]),
            (format!("{p}.norm2.bias"), vec![d]),
            (format!("{p}.mlp.fc1.weight"), vec![d, hidden]),
            (format!("{p}.mlp.fc1.bias"), vec![hidden]),
            (format!("{p}.mlp.fc2.weight"), vec![hidden, d]),
            (format!("{p}.mlp.fc2.bias"), vec![d]),
        ]);
    }
    let (h, b, k) = (cfg.head_hidden, cfg.head_bottleneck, cfg.out_dim);
    v.extend([
        ("norm.gain".to_string(), vec![d]),
        ("norm.bias".to_string(), vec![d]),
        ("head.fc1.weight".to_string(), vec![d, h]),
        ("head.fc1.bias".to_string(), vec![h]),
        ("head.fc2.weight".to_string(), vec![h, h]),
        ("head.fc2.bias".to_string(), vec![h]),
        ("head.fc3.weight".to_string(), vec![h, b]),
        ("head.fc3.bias".to_string(), vec![b]),
        ("head.last.weight".to_string(), vec![k, b]),
        ("head.last.gain".to_string(), vec![k]),
    ]);
    v
}

/// Fresh parameters: truncated normal (std 0.02) for projections and the
/// token/position tables, zero biases, unit norm gains.
pub fn init_params<T: Scalar>(cfg: &EncoderConfig, rng: &mut StreamRng) -> ParamSet<T> {
    param_shapes(cfg)
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let data: Vec<T> = if name.ends_with(".bias") {
                vec![T::zero(); n]
            } else if name.ends_with(".gain") {
                vec![T::one(); n]
            } else {
                (0..n).map(|_| T::of(trunc_normal(rng, INIT_STD))).collect()
            };
            let t = Tensor::from_vec(&shape, data)
                .expect("shape matches data")
                .with_grad();
            (name, t)
        })
        .collect()
}

/// Parameters exempt from weight decay: everything except projection weights.
pub fn exempt_from_decay(name: &str) -> bool {
    !name.ends_with(".weight")
}

/// Records each parameter on a tape at most once.
pub struct Bound<'p, T: Scalar> {
    params: &'p ParamSet<T>,
    vars: HashMap<&'p str, Var>,
}

impl<'p, T: Scalar> Bound<'p, T> {
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Bound {
            params,
            vars: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamSet<T> {
        self.params
    }

    pub fn get(&mut self, tape: &mut Tape<T>, name: &str) -> Var {
        let (key, tensor) = self
            .params
            .get_key_value(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"));
        *self
            .vars
            .entry(key.as_str())
            .or_insert_with(|| tape.param(key, tensor))
    }
}
