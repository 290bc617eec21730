//! Named parameter sections of the diffusion transformer and the layer
//! groups that unlearning can target.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Result, TdaError};
use crate::rng::{normal_matrix, stream};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

use super::config::ModelConfig;

// Global sections preceding the blocks.
pub(crate) const INPUT_W: usize = 0;
pub(crate) const INPUT_B: usize = 1;
pub(crate) const TIME_FC1_W: usize = 2;
pub(crate) const TIME_FC1_B: usize = 3;
pub(crate) const TIME_FC2_W: usize = 4;
pub(crate) const TIME_FC2_B: usize = 5;
pub(crate) const COND_W: usize = 6;
pub(crate) const COND_B: usize = 7;
pub(crate) const HEAD_SECTIONS: usize = 8;

// Offsets inside one transformer block.
pub(crate) const NORM1: usize = 0;
pub(crate) const SA_Q: usize = 1;
pub(crate) const SA_K: usize = 2;
pub(crate) const SA_V: usize = 3;
pub(crate) const SA_OUT_W: usize = 4;
pub(crate) const SA_OUT_B: usize = 5;
pub(crate) const NORM2: usize = 6;
pub(crate) const CA_Q: usize = 7;
pub(crate) const CA_K: usize = 8;
pub(crate) const CA_V: usize = 9;
pub(crate) const CA_OUT_W: usize = 10;
pub(crate) const CA_OUT_B: usize = 11;
pub(crate) const NORM3: usize = 12;
pub(crate) const FF1_W: usize = 13;
pub(crate) const FF1_B: usize = 14;
pub(crate) const FF2_W: usize = 15;
pub(crate) const FF2_B: usize = 16;
pub(crate) const BLOCK_SECTIONS: usize = 17;

// Sections after the blocks.
pub(crate) const OUT_NORM: usize = 0;
pub(crate) const OUT_W: usize = 1;
pub(crate) const OUT_B: usize = 2;

const BLOCK_NAMES: [&str; BLOCK_SECTIONS] = [
    "norm1.gain",
    "self_attn.to_q.weight",
    "self_attn.to_k.weight",
    "self_attn.to_v.weight",
    "self_attn.to_out.weight",
    "self_attn.to_out.bias",
    "norm2.gain",
    "cross_attn.to_q.weight",
    "cross_attn.to_k.weight",
    "cross_attn.to_v.weight",
    "cross_attn.to_out.weight",
    "cross_attn.to_out.bias",
    "norm3.gain",
    "ff.fc1.weight",
    "ff.fc1.bias",
    "ff.fc2.weight",
    "ff.fc2.bias",
];

#[inline]
pub(crate) fn block_index(block: usize, offset: usize) -> usize {
    HEAD_SECTIONS + block * BLOCK_SECTIONS + offset
}

#[inline]
pub(crate) fn tail_index(cfg: &ModelConfig, offset: usize) -> usize {
    HEAD_SECTIONS + cfg.num_blocks * BLOCK_SECTIONS + offset
}

/// Layer groups selectable as an unlearning target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerGroup {
    /// Key/value projections of cross-attention.
    ToKv,
    /// Every cross-attention weight.
    Cross,
    /// Every self-attention weight.
    #[serde(rename = "self")]
    SelfAttn,
    /// Every transformer-block weight.
    All,
}

impl LayerGroup {
    pub const ALL_GROUPS: [LayerGroup; 4] = [
        LayerGroup::ToKv,
        LayerGroup::Cross,
        LayerGroup::SelfAttn,
        LayerGroup::All,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerGroup::ToKv => "to_kv",
            LayerGroup::Cross => "cross",
            LayerGroup::SelfAttn => "self",
            LayerGroup::All => "all",
        }
    }

    fn contains_block_offset(self, offset: usize) -> bool {
        match self {
            LayerGroup::ToKv => matches!(offset, CA_K | CA_V),
            LayerGroup::Cross => (CA_Q..=CA_OUT_B).contains(&offset),
            LayerGroup::SelfAttn => (SA_Q..=SA_OUT_B).contains(&offset),
            LayerGroup::All => true,
        }
    }

    /// Section indices of this group in canonical order.
    pub fn sections(self, cfg: &ModelConfig) -> Vec<usize> {
        (0..cfg.num_blocks)
            .flat_map(|b| {
                (0..BLOCK_SECTIONS)
                    .filter(move |&o| self.contains_block_offset(o))
                    .map(move |o| block_index(b, o))
            })
            .collect()
    }
}

impl fmt::Display for LayerGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LayerGroup {
    type Err = TdaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "to_kv" => Ok(LayerGroup::ToKv),
            "cross" => Ok(LayerGroup::Cross),
            "self" => Ok(LayerGroup::SelfAttn),
            "all" => Ok(LayerGroup::All),
            other => arg_err(format!(
                "unknown layer group {other:?} (expected to_kv, cross, self or all)"
            )),
        }
    }
}

/// `(name, rows, cols)` for every section in canonical order.
pub fn section_specs(cfg: &ModelConfig) -> Vec<(String, usize, usize)> {
    let (d, w, c, h) = (cfg.latent_dim, cfg.model_width, cfg.cond_dim, cfg.ff_hidden);
    let mut specs = vec![
        ("input.weight".to_string(), d, w),
        ("input.bias".to_string(), 1, w),
        ("time_embed.fc1.weight".to_string(), w, w),
        ("time_embed.fc1.bias".to_string(), 1, w),
        ("time_embed.fc2.weight".to_string(), w, w),
        ("time_embed.fc2.bias".to_string(), 1, w),
        ("cond_proj.weight".to_string(), c, cfg.cond_tokens * w),
        ("cond_proj.bias".to_string(), 1, cfg.cond_tokens * w),
    ];
    for b in 0..cfg.num_blocks {
        for (o, name) in BLOCK_NAMES.iter().enumerate() {
            let (rows, cols) = match o {
                NORM1 | NORM2 | NORM3 | SA_OUT_B | CA_OUT_B | FF2_B => (1, w),
                FF1_W => (w, h),
                FF1_B => (1, h),
                FF2_W => (h, w),
                _ => (w, w),
            };
            specs.push((format!("blocks.{b}.{name}"), rows, cols));
        }
    }
    specs.push(("out_norm.gain".to_string(), 1, w));
    specs.push(("output.weight".to_string(), w, d));
    specs.push(("output.bias".to_string(), 1, d));
    specs
}

/// Parameter tensors of the transformer, one per named section.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    names: Vec<String>,
    tensors: Vec<Matrix<T>>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (names, tensors) = section_specs(cfg)
            .into_iter()
            .map(|(n, r, c)| (n, Matrix::zeros(r, c)))
            .unzip();
        Self { names, tensors }
    }

    /// Seeded initialization: normalization gains at 1, biases at 0,
    /// weights Gaussian with standard deviation `1/sqrt(fan_in)` (the output
    /// projection is shrunk by 10x).
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream(cfg.seed, &[0x1417]);
        let mut params = Self::zeros(cfg);
        let out_w = tail_index(cfg, OUT_W);
        for (i, (name, t)) in params
            .names
            .iter()
            .zip(params.tensors.iter_mut())
            .enumerate()
        {
            if name.ends_with(".gain") {
                *t = Matrix::filled(t.rows(), t.cols(), T::one());
            } else if name.ends_with(".weight") {
                let mut std = 1.0 / (t.rows() as f64).sqrt();
                if i == out_w {
                    std *= 0.1;
                }
                *t = normal_matrix(&mut rng, t.rows(), t.cols(), std);
            }
        }
        Ok(params)
    }

    /// Builds parameters from `(name, tensor)` pairs that must match the
    /// config's layout exactly.
    pub fn from_sections(cfg: &ModelConfig, sections: Vec<(String, Matrix<T>)>) -> Result<Self> {
        let specs = section_specs(cfg);
        if specs.len() != sections.len() {
            return shape_err(format!(
                "expected {} sections, found {}",
                specs.len(),
                sections.len()
            ));
        }
        for ((name, rows, cols), (got_name, t)) in specs.iter().zip(&sections) {
            if name != got_name || t.shape() != (*rows, *cols) {
                return shape_err(format!(
                    "section {got_name} {:?} does not match expected {name} ({rows}, {cols})",
                    t.shape()
                ));
            }
        }
        let (names, tensors) = sections.into_iter().unzip();
        Ok(Self { names, tensors })
    }

    pub(crate) fn sections_window_mut(&mut self, start: usize, end: usize) -> &mut [Matrix<T>] {
        &mut self.tensors[start..end]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn num_sections(&self) -> usize {
        self.tensors.len()
    }

    #[inline]
    pub fn section(&self, i: usize) -> &Matrix<T> {
        &self.tensors[i]
    }

    #[inline]
    pub fn section_mut(&mut self, i: usize) -> &mut Matrix<T> {
        &mut self.tensors[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Matrix::len).sum()
    }

    pub fn group_len(&self, cfg: &ModelConfig, group: LayerGroup) -> usize {
        group
            .sections(cfg)
            .into_iter()
            .map(|i| self.tensors[i].len())
            .sum()
    }

    /// Concatenates the group's sections in canonical order.
    pub fn flatten_group(&self, cfg: &ModelConfig, group: LayerGroup) -> Vec<T> {
        let mut out = Vec::with_capacity(self.group_len(cfg, group));
        for i in group.sections(cfg) {
            out.extend_from_slice(self.tensors[i].as_slice());
        }
        out
    }

    pub fn flatten_all(&self) -> Vec<T> {
        self.tensors
            .iter()
            .flat_map(|t| t.as_slice().iter().copied())
            .collect()
    }

    /// `self[group] += scale · delta`.
    pub fn add_scaled_to_group(
        &mut self,
        cfg: &ModelConfig,
        group: LayerGroup,
        delta: &[T],
        scale: T,
    ) -> Result<()> {
        let expected = self.group_len(cfg, group);
        if delta.len() != expected {
            return shape_err(format!(
                "group {group} has {expected} parameters, update has {}",
                delta.len()
            ));
        }
        let mut offset = 0;
        for i in group.sections(cfg) {
            let t = self.tensors[i].as_mut_slice();
            let len = t.len();
            for (p, &g) in t.iter_mut().zip(&delta[offset..offset + len]) {
                *p = *p + scale * g;
            }
            offset += len;
        }
        Ok(())
    }

    /// Flat view over every parameter, mutable, for finite differences and
    /// optimizers.
    pub fn for_each_mut(&mut self, mut f: impl FnMut(usize, &mut T)) {
        let mut k = 0;
        for t in &mut self.tensors {
            for p in t.as_mut_slice() {
                f(k, p);
                k += 1;
            }
        }
    }

    pub fn get_flat(&self, mut k: usize) -> T {
        for t in &self.tensors {
            if k < t.len() {
                return t.as_slice()[k];
            }
            k -= t.len();
        }
        panic!("flat parameter index out of range");
    }

    pub fn set_flat(&mut self, mut k: usize, v: T) {
        for t in &mut self.tensors {
            if k < t.len() {
                t.as_mut_slice()[k] = v;
                return;
            }
            k -= t.len();
        }
        panic!("flat parameter index out of range");
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: T) {
        for t in &mut self.tensors {
            t.scale(s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.as_slice().iter().all(|x| x.is_finite()))
    }

    /// Converts every value to another scalar type.
    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| {
                    Matrix::from_vec(
                        t.rows(),
                        t.cols(),
                        t.as_slice().iter().map(|x| U::lit(x.as_f64())).collect(),
                    )
                    .expect("same shape")
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_parse_and_print() {
        for g in LayerGroup::ALL_GROUPS {
            assert_eq!(g.name().parse::<LayerGroup>().unwrap(), g);
        }
        assert!(matches!(
            "mlp".parse::<LayerGroup>(),
            Err(TdaError::Argument(_))
        ));
    }

    #[test]
    fn group_all_is_exactly_the_block_weights() {
        let cfg = ModelConfig::default();
        let p = ModelParams::<f64>::zeros(&cfg);
        let all = LayerGroup::All.sections(&cfg);
        let expected: Vec<usize> = p
            .names()
            .iter()
            .enumerate()
            .filter(|(_, n)| n.starts_with("blocks."))
            .map(|(i, _)| i)
            .collect();
        assert_eq!(all, expected);
    }

    #[test]
    fn to_kv_is_inside_cross_and_disjoint_from_self() {
        let cfg = ModelConfig::default();
        let p = ModelParams::<f64>::zeros(&cfg);
        let kv = LayerGroup::ToKv.sections(&cfg);
        let cross = LayerGroup::Cross.sections(&cfg);
        let selfs = LayerGroup::SelfAttn.sections(&cfg);
        assert!(kv.iter().all(|i| cross.contains(i)));
        assert!(cross.iter().all(|i| !selfs.contains(i)));
        for &i in &kv {
            let n = &p.names()[i];
            assert!(
                n.contains("cross_attn.to_k") || n.contains("cross_attn.to_v"),
                "{n}"
            );
        }
        assert_eq!(kv.len(), 2 * cfg.num_blocks);
    }

    #[test]
    fn names_are_unique() {
        let cfg = ModelConfig::default();
        let p = ModelParams::<f64>::zeros(&cfg);
        let mut names = p.names().to_vec();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), p.num_sections());
    }

    #[test]
    fn init_is_seeded() {
        let cfg = ModelConfig::default();
        let a = ModelParams::<f64>::init(&cfg).unwrap();
        let b = ModelParams::<f64>::init(&cfg).unwrap();
        assert_eq!(a, b);
        let c = ModelParams::<f64>::init(&ModelConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn group_update_touches_only_the_group() {
        let cfg = ModelConfig::default();
        let base = ModelParams::<f64>::init(&cfg).unwrap();
        let mut p = base.clone();
        let n = p.group_len(&cfg, LayerGroup::ToKv);
        p.add_scaled_to_group(&cfg, LayerGroup::ToKv, &vec![1.0; n], 0.5)
            .unwrap();
        let kv = LayerGroup::ToKv.sections(&cfg);
        for i in 0..p.num_sections() {
            if kv.contains(&i) {
                assert_ne!(p.section(i), base.section(i));
            } else {
                assert_eq!(p.section(i), base.section(i));
            }
        }
        assert!(p
            .add_scaled_to_group(&cfg, LayerGroup::ToKv, &[1.0], 1.0)
            .is_err());
    }
}
