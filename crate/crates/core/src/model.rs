//! Small probabilistic classifiers: an MLP for vector data and a two-conv
//! CNN for 16×16 grayscale images, plus EMA teachers and checkpoints.

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{invalid, Error, Result};
use crate::rng::{stream, Stream};
use crate::tensor::{flatten_grads, flatten_values, Layout, ParamVector, Parameter, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Architecture {
    /// Fully connected ReLU network.
    Mlp { input_dim: usize, hidden: Vec<usize> },
    /// `conv(1→c0, 3×3, stride 2) → conv(c0→c1, 3×3, stride 2) → dense(hidden) → dense(C)`
    /// on `side × side` single-channel images.
    Cnn {
        side: usize,
        channels: [usize; 2],
        hidden: usize,
    },
}

impl Architecture {
    pub fn input_len(&self) -> usize {
        match self {
            Architecture::Mlp { input_dim, .. } => *input_dim,
            Architecture::Cnn { side, .. } => side * side,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub arch: Architecture,
    pub num_classes: usize,
    /// Coefficient of the `(wd/2)·‖w‖²` penalty added to the labeled loss.
    #[serde(default)]
    pub weight_decay: f64,
}

impl ClassifierConfig {
    pub fn mlp(input_dim: usize, hidden: Vec<usize>, num_classes: usize) -> Self {
        Self {
            arch: Architecture::Mlp { input_dim, hidden },
            num_classes,
            weight_decay: 0.0,
        }
    }

    pub fn cnn(side: usize, channels: [usize; 2], hidden: usize, num_classes: usize) -> Self {
        Self {
            arch: Architecture::Cnn {
                side,
                channels,
                hidden,
            },
            num_classes,
            weight_decay: 0.0,
        }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(invalid("classifier needs at least 2 classes"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(invalid("weight decay must be nonnegative"));
        }
        match &self.arch {
            Architecture::Mlp { input_dim, hidden } => {
                if *input_dim == 0 || hidden.contains(&0) {
                    return Err(invalid("MLP widths must be positive"));
                }
            }
            Architecture::Cnn {
                side,
                channels,
                hidden,
            } => {
                if *side < 4 || channels.contains(&0) || *hidden == 0 {
                    return Err(invalid("CNN side must be ≥ 4 and widths positive"));
                }
            }
        }
        Ok(())
    }
}

fn conv_out(side: usize) -> usize {
    (side + 2 - 3) / 2 + 1
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    config: ClassifierConfig,
    params: Vec<Parameter>,
    layout: Arc<Layout>,
}

fn uniform_param(
    name: String,
    shape: Vec<usize>,
    bound: f64,
    rng: &mut impl Rng,
) -> Parameter {
    let n = shape.iter().product();
    let values = (0..n)
        .map(|_| if bound > 0.0 { rng.random_range(-bound..bound) } else { 0.0 })
        .collect();
    Parameter {
        name,
        tensor: Tensor::param(shape, values).expect("consistent shape"),
    }
}

fn dense(name: &str, fan_in: usize, fan_out: usize, gain: f64, rng: &mut impl Rng) -> [Parameter; 2] {
    let bound = (gain / fan_in as f64).sqrt();
    [
        uniform_param(format!("{name}.weight"), vec![fan_in, fan_out], bound, rng),
        uniform_param(format!("{name}.bias"), vec![fan_out], 0.0, rng),
    ]
}

fn conv(name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> [Parameter; 2] {
    let fan_in = cin * 9;
    let bound = (6.0 / fan_in as f64).sqrt();
    [
        uniform_param(format!("{name}.weight"), vec![cout, cin, 3, 3], bound, rng),
        uniform_param(format!("{name}.bias"), vec![cout], 0.0, rng),
    ]
}

impl Classifier {
    /// Fan-in scaled uniform initialization, reproducible per seed.
    ///
    /// Hidden layers use `U(±√(6/fan_in))`, the output layer `U(±√(1/fan_in))`;
    /// biases start at zero.
    pub fn init(config: ClassifierConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, 0, Stream::Init);
        let c = config.num_classes;
        let mut params = Vec::new();
        match &config.arch {
            Architecture::Mlp { input_dim, hidden } => {
                let mut fan_in = *input_dim;
                for (i, &h) in hidden.iter().enumerate() {
                    params.extend(dense(&format!("fc{i}"), fan_in, h, 6.0, &mut rng));
                    fan_in = h;
                }
                params.extend(dense(&format!("fc{}", hidden.len()), fan_in, c, 1.0, &mut rng));
            }
            Architecture::Cnn {
                side,
                channels,
                hidden,
            } => {
                params.extend(conv("conv0", 1, channels[0], &mut rng));
                params.extend(conv("conv1", channels[0], channels[1], &mut rng));
                let s = conv_out(conv_out(*side));
                params.extend(dense("fc0", channels[1] * s * s, *hidden, 6.0, &mut rng));
                params.extend(dense("fc1", *hidden, c, 1.0, &mut rng));
            }
        }
        let layout = Arc::new(Layout::of(&params));
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.layout.len()
    }

    /// Insert the parameters as differentiable leaves.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.variable(&p.tensor)).collect()
    }

    /// Insert the parameters as constants (no gradient flows to them).
    pub fn bind_frozen(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.constant(&p.tensor)).collect()
    }

    fn check_input(&self, shape: &[usize]) -> Result<usize> {
        let want = self.config.arch.input_len();
        let n = shape.first().copied().unwrap_or(0);
        let per: usize = shape.iter().skip(1).product();
        if shape.len() < 2 || per != want {
            return Err(Error::ShapeMismatch {
                op: "classifier input",
                lhs: vec![n, want],
                rhs: shape.to_vec(),
            });
        }
        Ok(n)
    }

    /// Logits `[n, C]` for input `x` using bound parameters `p`.
    pub fn logits(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        let n = self.check_input(g.shape(x))?;
        match &self.config.arch {
            Architecture::Mlp { input_dim, hidden } => {
                let mut h = if g.shape(x).len() == 2 {
                    x
                } else {
                    g.reshape(x, vec![n, *input_dim])?
                };
                for i in 0..hidden.len() {
                    let a = g.affine(h, p[2 * i], Some(p[2 * i + 1]))?;
                    h = g.relu(a);
                }
                let k = hidden.len();
                g.affine(h, p[2 * k], Some(p[2 * k + 1]))
            }
            Architecture::Cnn { side, channels, .. } => {
                let img = g.reshape(x, vec![n, 1, *side, *side])?;
                let c0 = g.conv2d(img, p[0], Some(p[1]), 2, 1)?;
                let r0 = g.relu(c0);
                let c1 = g.conv2d(r0, p[2], Some(p[3]), 2, 1)?;
                let r1 = g.relu(c1);
                let s = conv_out(conv_out(*side));
                let flat = g.reshape(r1, vec![n, channels[1] * s * s])?;
                let a = g.affine(flat, p[4], Some(p[5]))?;
                let h = g.relu(a);
                g.affine(h, p[6], Some(p[7]))
            }
        }
    }

    /// Class probabilities `[n, C]` for input `x` using bound parameters `p`.
    pub fn probs(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        let z = self.logits(g, p, x)?;
        Ok(g.softmax(z))
    }

    /// Detached class probabilities; each row sums to one.
    pub fn predict_proba(&self, x: &Tensor) -> Result<Tensor> {
        let n = self.check_input(x.shape())?;
        if n == 0 {
            return Tensor::new(vec![0, self.num_classes()], vec![]);
        }
        let mut g = Graph::new();
        let p = self.bind_frozen(&mut g);
        let xv = g.constant(x);
        let probs = self.probs(&mut g, &p, xv)?;
        Ok(g.tensor(probs))
    }

    /// `(wd/2)·‖w‖²` over all parameters, or `None` when wd is zero.
    pub fn weight_decay_loss(&self, g: &mut Graph, p: &[Var]) -> Result<Option<Var>> {
        let wd = self.config.weight_decay;
        if wd == 0.0 {
            return Ok(None);
        }
        let mut total: Option<Var> = None;
        for &v in p {
            let sq = g.mul(v, v)?;
            let s = g.sum(sq);
            total = Some(match total {
                Some(t) => g.add(t, s)?,
                None => s,
            });
        }
        Ok(total.map(|t| g.scale(t, wd / 2.0)))
    }

    pub fn flat_params(&self) -> ParamVector {
        flatten_values(&self.params, self.layout.clone()).expect("layout matches params")
    }

    pub fn flat_grads(&self) -> Result<ParamVector> {
        flatten_grads(&self.params, self.layout.clone())
    }

    /// Overwrite the parameters from a flat vector with the same layout.
    pub fn load_flat(&mut self, v: &ParamVector) -> Result<()> {
        if !(Arc::ptr_eq(v.layout(), &self.layout) || **v.layout() == *self.layout) {
            return Err(Error::LayoutMismatch);
        }
        for (p, e) in self.params.iter_mut().zip(self.layout.entries()) {
            let n = p.tensor.len();
            p.tensor
                .values_mut()
                .copy_from_slice(&v.entries()[e.offset..e.offset + n]);
        }
        Ok(())
    }

    /// Store per-parameter gradients from a flat vector.
    pub fn set_grads(&mut self, g: &ParamVector) -> Result<()> {
        if **g.layout() != *self.layout {
            return Err(Error::LayoutMismatch);
        }
        for (p, e) in self.params.iter_mut().zip(self.layout.entries()) {
            let n = p.tensor.len();
            p.tensor.set_grad(g.entries()[e.offset..e.offset + n].to_vec())?;
        }
        Ok(())
    }

    /// `θ_teacher ← decay·θ_teacher + (1−decay)·θ_student`.
    pub fn ema_update(&mut self, student: &Classifier, decay: f64) -> Result<()> {
        if !(0.0..1.0).contains(&decay) {
            return Err(invalid(format!("EMA decay must be in [0, 1), got {decay}")));
        }
        if *self.layout != *student.layout {
            return Err(Error::LayoutMismatch);
        }
        for (t, s) in self.params.iter_mut().zip(&student.params) {
            for (tv, sv) in t.tensor.values_mut().iter_mut().zip(s.tensor.values()) {
                *tv = sv + decay * (*tv - sv);
            }
        }
        Ok(())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let ck = Checkpoint {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            layout: (*self.layout).clone(),
            values: self.flat_params().entries().to_vec(),
        };
        std::fs::write(path, serde_json::to_vec(&ck)?)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_slice(&std::fs::read(path)?)?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(invalid(format!(
                "unsupported checkpoint version {}",
                ck.format_version
            )));
        }
        let mut model = Classifier::init(ck.config, 0)?;
        if ck.layout != *model.layout {
            return Err(Error::LayoutMismatch);
        }
        let v = ParamVector::new(model.layout.clone(), ck.values)?;
        model.load_flat(&v)?;
        Ok(model)
    }
}

/// On-disk model: the flat parameter vector plus its layout.
#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    config: ClassifierConfig,
    layout: Layout,
    values: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use proptest::prelude::*;

    fn mlp() -> ClassifierConfig {
        ClassifierConfig::mlp(4, vec![8], 3)
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = Classifier::init(mlp(), 11).unwrap();
        let b = Classifier::init(mlp(), 11).unwrap();
        let c = Classifier::init(mlp(), 12).unwrap();
        assert_eq!(a.flat_params(), b.flat_params());
        assert_ne!(a.flat_params(), c.flat_params());
    }

    #[test]
    fn mlp_parameter_count() {
        let m = Classifier::init(mlp(), 0).unwrap();
        assert_eq!(m.param_count(), 4 * 8 + 8 + 8 * 3 + 3);
    }

    #[test]
    fn rejects_single_class() {
        assert!(Classifier::init(ClassifierConfig::mlp(4, vec![8], 1), 0).is_err());
        assert!(Classifier::init(ClassifierConfig::mlp(4, vec![0], 3), 0).is_err());
    }

    #[test]
    fn zero_final_layer_gives_uniform_rows() {
        let mut m = Classifier::init(mlp(), 3).unwrap();
        let n = m.params().len();
        for p in &mut m.params_mut()[n - 2..] {
            p.tensor.values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = Tensor::new(vec![5, 4], (0..20).map(|i| i as f64 * 0.3 - 2.0).collect()).unwrap();
        let p = m.predict_proba(&x).unwrap();
        assert_eq!(p.shape(), &[5, 3]);
        for v in p.values() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn predict_rejects_wrong_width() {
        let m = Classifier::init(mlp(), 0).unwrap();
        let x = Tensor::zeros(vec![2, 5]);
        assert!(matches!(m.predict_proba(&x), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn cnn_forward_shapes() {
        let m = Classifier::init(ClassifierConfig::cnn(16, [4, 8], 16, 6), 1).unwrap();
        let x = Tensor::new(vec![3, 256], (0..768).map(|i| ((i % 17) as f64) / 17.0).collect()).unwrap();
        let p = m.predict_proba(&x).unwrap();
        assert_eq!(p.shape(), &[3, 6]);
        for row in p.iter_rows() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ema_examples() {
        let student = Classifier::init(mlp(), 1).unwrap();
        let mut teacher = Classifier::init(mlp(), 2).unwrap();
        teacher.ema_update(&student, 0.0).unwrap();
        assert_eq!(teacher.flat_params(), student.flat_params());

        let mut same = student.clone();
        same.ema_update(&student, 0.7).unwrap();
        assert_eq!(same.flat_params(), student.flat_params());

        let mut t = Classifier::init(mlp(), 1).unwrap();
        let mut s = t.clone();
        let ones = ParamVector::new(t.layout().clone(), vec![2.0; t.param_count()]).unwrap();
        t.load_flat(&ones).unwrap();
        s.load_flat(&ParamVector::zeros(s.layout().clone())).unwrap();
        t.ema_update(&s, 0.5).unwrap();
        assert!(t.flat_params().entries().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn ema_rejects_layout_mismatch() {
        let mut t = Classifier::init(mlp(), 1).unwrap();
        let s = Classifier::init(ClassifierConfig::mlp(4, vec![9], 3), 1).unwrap();
        assert!(matches!(t.ema_update(&s, 0.9), Err(Error::LayoutMismatch)));
    }

    #[test]
    fn weight_decay_matches_finite_differences() {
        let m = Classifier::init(mlp().with_weight_decay(0.37), 5).unwrap();
        let tensors: Vec<Tensor> = m.params().iter().map(|p| p.tensor.clone()).collect();
        let err = finite_diff_check(
            |g, v| Ok(m.weight_decay_loss(g, v)?.unwrap()),
            &tensors,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");

        // gradient is exactly wd·w
        let mut g = Graph::new();
        let p = m.bind(&mut g);
        let l = m.weight_decay_loss(&mut g, &p).unwrap().unwrap();
        let sq: f64 = m.flat_params().norm_sq();
        assert!((g.scalar(l) - 0.37 / 2.0 * sq).abs() < 1e-12);
        g.backward(l).unwrap();
        for (v, prm) in p.iter().zip(m.params()) {
            for (gv, w) in g.grad(*v).unwrap().iter().zip(prm.tensor.values()) {
                assert!((gv - 0.37 * w).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let m = Classifier::init(ClassifierConfig::cnn(8, [2, 3], 5, 4), 9).unwrap();
        m.save_checkpoint(&path).unwrap();
        let back = Classifier::load_checkpoint(&path).unwrap();
        assert_eq!(back.flat_params(), m.flat_params());
        assert_eq!(back.config(), m.config());
    }

    proptest! {
        #[test]
        fn predict_rows_are_distributions(xs in prop::collection::vec(-1e3f64..1e3, 8), seed in 0u64..50) {
            let m = Classifier::init(mlp(), seed).unwrap();
            let x = Tensor::new(vec![2, 4], xs).unwrap();
            let p = m.predict_proba(&x).unwrap();
            for row in p.iter_rows() {
                prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn ema_is_convex(decay in 0.0f64..0.999, s1 in 0u64..20, s2 in 20u64..40) {
            let student = Classifier::init(mlp(), s1).unwrap();
            let mut teacher = Classifier::init(mlp(), s2).unwrap();
            let before = teacher.flat_params();
            teacher.ema_update(&student, decay).unwrap();
            let after = teacher.flat_params();
            let sp = student.flat_params();
            for ((a, b), s) in after.entries().iter().zip(before.entries()).zip(sp.entries()) {
                prop_assert!(*a >= b.min(*s) - 1e-15 && *a <= b.max(*s) + 1e-15);
            }
        }
    }
}
