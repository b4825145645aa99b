//! Shared feature extractor with a true-positive head (what the input is)
//! and a true-negative head (what it is not).
//!
//! Both heads are identical two-layer perceptrons. The extractor is either a
//! ReLU stack of fully connected layers or, for image rows, two
//! conv + ReLU + max-pool blocks followed by an optional fully connected stack.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{ops, ImageGeom, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// Convolutional front end for image rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub geom: ImageGeom,
    pub channels: [usize; 2],
    pub kernel: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub head_hidden: usize,
    pub classes: usize,
    #[serde(default)]
    pub conv: Option<ConvSpec>,
}

impl ModelSpec {
    pub fn mlp(input_dim: usize, hidden: &[usize], head_hidden: usize, classes: usize) -> Self {
        ModelSpec {
            input_dim,
            hidden: hidden.to_vec(),
            head_hidden,
            classes,
            conv: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.input_dim == 0 || self.head_hidden == 0 || self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if let Some(conv) = &self.conv {
            if conv.geom.len() != self.input_dim {
                return Err(Error::Config(format!(
                    "image {:?} has {} values but input_dim is {}",
                    conv.geom,
                    conv.geom.len(),
                    self.input_dim
                )));
            }
            if conv.kernel % 2 == 0 || conv.channels.contains(&0) {
                return Err(Error::Config("conv kernel must be odd and channels positive".into()));
            }
            if conv.geom.height < 4 || conv.geom.width < 4 {
                return Err(Error::Config("conv extractor needs images of at least 4x4".into()));
            }
        }
        Ok(())
    }

    fn conv_geoms(&self) -> Option<[ImageGeom; 2]> {
        self.conv.as_ref().map(|c| {
            let g0 = c.geom;
            let g1 = ImageGeom {
                channels: c.channels[0],
                ..g0
            }
            .pooled();
            [g0, g1]
        })
    }

    fn fc_input_dim(&self) -> usize {
        match (&self.conv, self.conv_geoms()) {
            (Some(c), Some([_, g1])) => {
                ImageGeom {
                    channels: c.channels[1],
                    ..g1
                }
                .pooled()
                .len()
            }
            _ => self.input_dim,
        }
    }

    /// Width of the extractor output `z`.
    pub fn feature_dim(&self) -> usize {
        self.hidden.last().copied().unwrap_or_else(|| self.fc_input_dim())
    }
}

/// Which parameter collection a tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Extractor,
    Tpc,
    Tnc,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    extractor: Range<usize>,
    tpc: Range<usize>,
    tnc: Range<usize>,
    convs: usize,
    fcs: usize,
}

fn spec_extractor_len(spec: &ModelSpec) -> usize {
    2 * spec.hidden.len() + if spec.conv.is_some() { 4 } else { 0 }
}

impl Layout {
    fn for_spec(spec: &ModelSpec) -> Layout {
        let mut entries: Vec<(String, Vec<usize>)> = Vec::new();
        let mut push = |name: String, shape: Vec<usize>| entries.push((name, shape));
        let mut convs = 0;
        if let (Some(c), Some(geoms)) = (&spec.conv, spec.conv_geoms()) {
            for (i, g) in geoms.iter().enumerate() {
                push(format!("extractor.conv{i}.weight"), vec![c.channels[i], g.channels * c.kernel * c.kernel]);
                push(format!("extractor.conv{i}.bias"), vec![c.channels[i]]);
            }
            convs = 2;
        }
        let mut width = spec.fc_input_dim();
        for (i, &h) in spec.hidden.iter().enumerate() {
            push(format!("extractor.fc{i}.weight"), vec![width, h]);
            push(format!("extractor.fc{i}.bias"), vec![h]);
            width = h;
        }
        let extractor = 0..spec_extractor_len(spec);
        let feat = spec.feature_dim();
        for head in ["tpc", "tnc"] {
            push(format!("{head}.fc0.weight"), vec![feat, spec.head_hidden]);
            push(format!("{head}.fc0.bias"), vec![spec.head_hidden]);
            push(format!("{head}.fc1.weight"), vec![spec.head_hidden, spec.classes]);
            push(format!("{head}.fc1.bias"), vec![spec.classes]);
        }
        let tpc = extractor.end..extractor.end + 4;
        let tnc = tpc.end..tpc.end + 4;
        let (names, shapes) = entries.into_iter().unzip();
        Layout {
            names,
            shapes,
            extractor,
            tpc,
            tnc,
            convs,
            fcs: spec.hidden.len(),
        }
    }
}

/// All trainable tensors of the dual-head classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    spec: ModelSpec,
    layout: Layout,
    tensors: Vec<Tensor>,
}

/// Deterministic initialisation of an MLP-extractor model.
pub fn init_model(
    input_dim: usize,
    hidden: &[usize],
    head_hidden: usize,
    classes: usize,
    seed: u64,
) -> Result<ModelParams> {
    ModelParams::init(&ModelSpec::mlp(input_dim, hidden, head_hidden, classes), seed)
}

impl ModelParams {
    /// He-style normal weights (`sqrt(2 / fan_in)`, `sqrt(1 / fan_in)` on the
    /// logit layers) and zero biases. The negative head draws from its own
    /// stream so the rest of the model is independent of it.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<ModelParams> {
        spec.validate()?;
        let layout = Layout::for_spec(spec);
        let mut shared = rng::stream(seed, Stream::Init);
        let mut negative = rng::stream(seed, Stream::InitNegative);
        let mut tensors = Vec::with_capacity(layout.names.len());
        for (i, (name, shape)) in layout.names.iter().zip(&layout.shapes).enumerate() {
            if name.ends_with(".bias") {
                tensors.push(Tensor::zeros(shape));
                continue;
            }
            let fan_in = if name.contains(".conv") { shape[1] } else { shape[0] };
            let gain = if name.ends_with("fc1.weight") && !layout.extractor.contains(&i) {
                1.0
            } else {
                2.0
            };
            let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt())
                .map_err(|e| Error::Config(e.to_string()))?;
            let rng: &mut dyn rand::RngCore = if layout.tnc.contains(&i) {
                &mut negative
            } else {
                &mut shared
            };
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| normal.sample(rng)).collect();
            tensors.push(Tensor::new(shape.clone(), data)?);
        }
        Ok(ModelParams {
            spec: spec.clone(),
            layout,
            tensors,
        })
    }

    /// Rebuilds a model from named tensors, checking names and shapes.
    pub fn from_named(spec: &ModelSpec, named: Vec<(String, Tensor)>) -> Result<ModelParams> {
        spec.validate()?;
        let layout = Layout::for_spec(spec);
        if named.len() != layout.names.len() {
            return Err(Error::Dimension(format!(
                "expected {} parameter arrays, got {}",
                layout.names.len(),
                named.len()
            )));
        }
        let mut tensors = Vec::with_capacity(named.len());
        for ((name, t), (want, shape)) in named.into_iter().zip(layout.names.iter().zip(&layout.shapes)) {
            if &name != want || t.shape() != shape.as_slice() {
                return Err(Error::Dimension(format!(
                    "parameter {name} {:?} does not match expected {want} {shape:?}",
                    t.shape()
                )));
            }
            t.ensure_finite(&name)?;
            tensors.push(t);
        }
        Ok(ModelParams {
            spec: spec.clone(),
            layout,
            tensors,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.layout.names
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.layout.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn group_range(&self, group: Group) -> Range<usize> {
        match group {
            Group::Extractor => self.layout.extractor.clone(),
            Group::Tpc => self.layout.tpc.clone(),
            Group::Tnc => self.layout.tnc.clone(),
        }
    }

    pub fn group_of(&self, index: usize) -> Group {
        if self.layout.extractor.contains(&index) {
            Group::Extractor
        } else if self.layout.tpc.contains(&index) {
            Group::Tpc
        } else {
            Group::Tnc
        }
    }

    pub fn param_count(&self, group: Group) -> usize {
        self.group_range(group).map(|i| self.tensors[i].len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Puts every parameter on `tape`, trainable unless its group is frozen.
    pub fn register(&self, tape: &mut Tape, frozen: &[Group]) -> Result<ModelVars> {
        let mut vars = Vec::with_capacity(self.tensors.len());
        for (i, t) in self.tensors.iter().enumerate() {
            let v = if frozen.contains(&self.group_of(i)) {
                tape.constant(t.clone())?
            } else {
                tape.param(t.clone())?
            };
            vars.push(v);
        }
        Ok(ModelVars { vars })
    }

    fn check_input(&self, x_cols: usize) -> Result<()> {
        if x_cols != self.spec.input_dim {
            return Err(Error::Dimension(format!(
                "input has {x_cols} features, model expects {}",
                self.spec.input_dim
            )));
        }
        Ok(())
    }

    fn extract<B: Backend>(&self, b: &mut B, x: B::V) -> Result<B::V> {
        let mut h = x;
        if let (Some(c), Some(geoms)) = (&self.spec.conv, self.spec.conv_geoms()) {
            for (i, g) in geoms.iter().enumerate() {
                h = b.conv(&h, 2 * i, 2 * i + 1, *g, c.kernel)?;
                h = b.relu(&h)?;
                let out = ImageGeom {
                    channels: c.channels[i],
                    ..*g
                };
                h = b.pool(&h, out)?;
            }
        }
        let base = 2 * self.layout.convs;
        for i in 0..self.layout.fcs {
            h = b.linear(&h, base + 2 * i, base + 2 * i + 1)?;
            h = b.relu(&h)?;
        }
        Ok(h)
    }

    fn head<B: Backend>(&self, b: &mut B, group: Group, z: &B::V) -> Result<B::V> {
        let r = self.group_range(group);
        let h = b.linear(z, r.start, r.start + 1)?;
        let h = b.relu(&h)?;
        let logits = b.linear(&h, r.start + 2, r.start + 3)?;
        b.softmax(&logits)
    }

    /// Extractor features on the tape.
    pub fn features_on(&self, tape: &mut Tape, vars: &ModelVars, x: Var) -> Result<Var> {
        self.check_input(tape.value(x).cols())?;
        self.extract(&mut TapeBackend { tape, vars }, x)
    }

    /// Class probabilities of the `Tpc` or `Tnc` head on the tape.
    pub fn head_on(&self, tape: &mut Tape, vars: &ModelVars, group: Group, z: Var) -> Result<Var> {
        if group == Group::Extractor {
            return Err(Error::Usage("extractor is not a head".into()));
        }
        self.head(&mut TapeBackend { tape, vars }, group, &z)
    }

    /// Gradient-free forward through the whole model.
    pub fn infer(&self, x: &Tensor) -> Result<Inference> {
        self.check_input(x.cols())?;
        let mut b = PlainBackend { params: self };
        let z = self.extract(&mut b, x.clone())?;
        let p = self.head(&mut b, Group::Tpc, &z)?;
        let r = self.head(&mut b, Group::Tnc, &z)?;
        Ok(Inference { z, p, r })
    }

    /// Gradient-free features only.
    pub fn infer_features(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x.cols())?;
        self.extract(&mut PlainBackend { params: self }, x.clone())
    }

    /// Gradient-free head probabilities on given features.
    pub fn infer_head(&self, group: Group, z: &Tensor) -> Result<Tensor> {
        self.head(&mut PlainBackend { params: self }, group, z)
    }

    /// TPC class probabilities; this is the head used at test time.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let z = self.infer_features(x)?;
        self.infer_head(Group::Tpc, &z)
    }
}

/// Tape handles for each parameter tensor, in [`ModelParams::tensors`] order.
#[derive(Clone, Debug)]
pub struct ModelVars {
    vars: Vec<Var>,
}

impl ModelVars {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Accumulated gradients, zero where no backward pass reached a parameter.
    pub fn grads(&self, tape: &Tape) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|&v| {
                tape.grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
            })
            .collect()
    }
}

/// Output of a gradient-free forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub z: Tensor,
    pub p: Tensor,
    pub r: Tensor,
}

trait Backend {
    type V;
    fn linear(&mut self, x: &Self::V, w: usize, b: usize) -> Result<Self::V>;
    fn conv(&mut self, x: &Self::V, w: usize, b: usize, geom: ImageGeom, kernel: usize) -> Result<Self::V>;
    fn pool(&mut self, x: &Self::V, geom: ImageGeom) -> Result<Self::V>;
    fn relu(&mut self, x: &Self::V) -> Result<Self::V>;
    fn softmax(&mut self, x: &Self::V) -> Result<Self::V>;
}

struct TapeBackend<'a> {
    tape: &'a mut Tape,
    vars: &'a ModelVars,
}

impl Backend for TapeBackend<'_> {
    type V = Var;

    fn linear(&mut self, x: &Var, w: usize, b: usize) -> Result<Var> {
        let h = self.tape.matmul(*x, self.vars.vars[w])?;
        self.tape.add_row_bias(h, self.vars.vars[b])
    }

    fn conv(&mut self, x: &Var, w: usize, b: usize, geom: ImageGeom, kernel: usize) -> Result<Var> {
        self.tape.conv2d(*x, self.vars.vars[w], self.vars.vars[b], geom, kernel)
    }

    fn pool(&mut self, x: &Var, geom: ImageGeom) -> Result<Var> {
        self.tape.maxpool2d(*x, geom)
    }

    fn relu(&mut self, x: &Var) -> Result<Var> {
        self.tape.relu(*x)
    }

    fn softmax(&mut self, x: &Var) -> Result<Var> {
        self.tape.softmax(*x)
    }
}

struct PlainBackend<'a> {
    params: &'a ModelParams,
}

impl Backend for PlainBackend<'_> {
    type V = Tensor;

    fn linear(&mut self, x: &Tensor, w: usize, b: usize) -> Result<Tensor> {
        let t = &self.params.tensors;
        let h = ops::matmul(x, &t[w])?;
        let out = ops::add_row_bias(&h, &t[b])?;
        out.ensure_finite("linear")?;
        Ok(out)
    }

    fn conv(&mut self, x: &Tensor, w: usize, b: usize, geom: ImageGeom, kernel: usize) -> Result<Tensor> {
        let t = &self.params.tensors;
        ops::conv2d(x, &t[w], &t[b], geom, kernel)
    }

    fn pool(&mut self, x: &Tensor, geom: ImageGeom) -> Result<Tensor> {
        Ok(ops::maxpool2d(x, geom)?.0)
    }

    fn relu(&mut self, x: &Tensor) -> Result<Tensor> {
        Ok(ops::relu(x))
    }

    fn softmax(&mut self, x: &Tensor) -> Result<Tensor> {
        ops::softmax_rows(x)
    }
}

/// Draws a `[rows, cols]` standard-normal matrix; handy for tests and demos.
pub fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn same_seed_same_parameters() {
        let a = init_model(16, &[32, 32], 64, 10, 7).unwrap();
        let b = init_model(16, &[32, 32], 64, 10, 7).unwrap();
        assert_eq!(a, b);
        let bits = |m: &ModelParams| -> Vec<u64> {
            m.tensors().iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect()
        };
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn different_seed_differs() {
        let a = init_model(16, &[32], 64, 10, 1).unwrap();
        let b = init_model(16, &[32], 64, 10, 2).unwrap();
        assert_ne!(a.tensors(), b.tensors());
    }

    #[test]
    fn head_shapes_for_ten_classes() {
        let m = init_model(16, &[128, 128], 64, 10, 0).unwrap();
        for group in [Group::Tpc, Group::Tnc] {
            let r = m.group_range(group);
            let t = &m.tensors()[r.clone()];
            assert_eq!(t[0].shape(), &[128, 64]);
            assert_eq!(t[2].shape(), &[64, 10]);
        }
        assert_eq!(m.param_count(Group::Tpc), m.param_count(Group::Tnc));
        assert!(m.tensors()[m.group_range(Group::Tpc)][1].data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn one_class_is_config_error() {
        assert!(matches!(init_model(4, &[8], 8, 1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn infer_rejects_wrong_width() {
        let m = init_model(4, &[8], 8, 3, 0).unwrap();
        assert!(matches!(m.infer(&Tensor::zeros(&[2, 5])), Err(Error::Dimension(_))));
    }

    #[test]
    fn tape_and_plain_forwards_agree_bitwise() {
        let m = init_model(6, &[12, 10], 8, 4, 3).unwrap();
        let x = random_matrix(5, 6, &mut rand_chacha::ChaCha8Rng::seed_from_u64(1));
        let plain = m.infer(&x).unwrap();
        let mut tape = Tape::new();
        let vars = m.register(&mut tape, &[]).unwrap();
        let xv = tape.constant(x).unwrap();
        let z = m.features_on(&mut tape, &vars, xv).unwrap();
        let p = m.head_on(&mut tape, &vars, Group::Tpc, z).unwrap();
        let r = m.head_on(&mut tape, &vars, Group::Tnc, z).unwrap();
        assert_eq!(tape.value(z), &plain.z);
        assert_eq!(tape.value(p), &plain.p);
        assert_eq!(tape.value(r), &plain.r);
    }

    #[test]
    fn conv_extractor_runs() {
        let spec = ModelSpec {
            input_dim: 64,
            hidden: vec![16],
            head_hidden: 8,
            classes: 3,
            conv: Some(ConvSpec {
                geom: ImageGeom {
                    channels: 1,
                    height: 8,
                    width: 8,
                },
                channels: [4, 6],
                kernel: 3,
            }),
        };
        let m = ModelParams::init(&spec, 0).unwrap();
        assert_eq!(m.tensors()[4].shape(), &[6 * 2 * 2, 16]);
        let out = m.infer(&Tensor::ones(&[2, 64])).unwrap();
        assert_eq!(out.p.shape(), &[2, 3]);
        for row in out.p.row_iter() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
