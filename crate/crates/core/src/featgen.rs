//! Class-conditional Wasserstein feature generator with gradient penalty and
//! a mode-seeking regularizer.
//!
//! Sign conventions follow the usual minimization form: the critic minimizes
//! `E[D(fake)] - E[D(real)] + λ·GP` and the generator minimizes
//! `-E[D(G(z₁,a))] - α·E[‖G(z₁,a) - G(z₂,a)‖₁ / ‖z₁ - z₂‖₁]`, so the
//! mode-seeking ratio is pushed up.

use ndarray::{Array1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gcat::GestureFeature;
use crate::nn::{permutation, Adam, AdamConfig, Bound, Linear, ParamStore};
use crate::tape::{Mat, Tape, Unary, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GanConfig {
    /// Gradient-penalty coefficient λ.
    pub lambda: f64,
    /// Mode-seeking weight α.
    pub alpha: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub critic_steps: usize,
    pub noise_dim: usize,
    pub hidden_dim: usize,
    pub hidden_layers: usize,
    pub leaky_slope: f64,
    pub batch_size: usize,
    /// Generator updates.
    pub iterations: usize,
    pub n_syn_per_class: usize,
    pub seed: u64,
    /// Abort when the critic loss magnitude exceeds this.
    pub divergence_limit: f64,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            alpha: 1e-4,
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            critic_steps: 5,
            noise_dim: 512,
            hidden_dim: 4096,
            hidden_layers: 2,
            leaky_slope: 0.2,
            batch_size: 64,
            iterations: 2000,
            n_syn_per_class: 400,
            seed: 0,
            divergence_limit: 1e6,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::config("gan.lambda", "must be nonnegative"));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::config("gan.alpha", "must be nonnegative"));
        }
        if self.critic_steps == 0 {
            return Err(Error::config("gan.critic_steps", "must be at least 1"));
        }
        if self.noise_dim == 0 || self.hidden_dim == 0 || self.batch_size == 0 {
            return Err(Error::config("gan", "noise_dim, hidden_dim and batch_size must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("gan.lr", "must be positive"));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::adam(self.lr)
        }
    }
}

/// A critic that can also build its input gradient on the tape, which the
/// gradient penalty needs in differentiable form.
pub trait Critic {
    fn params(&self) -> &ParamStore;

    /// `B x 1` scores.
    fn score(&self, tape: &Tape, p: &Bound, x: Var, a: Var) -> Var;

    /// `∂D/∂x` as a `B x d` tape expression.
    fn input_gradient(&self, tape: &Tape, p: &Bound, x: Var, a: Var) -> Var;
}

/// `D(x, a) = x·w`, ignoring the condition. Used to check the penalty in closed form.
pub struct LinearCritic {
    pub params: ParamStore,
    w: crate::nn::ParamId,
}

impl LinearCritic {
    pub fn new(w: Array1<f64>) -> Self {
        let mut params = ParamStore::new();
        let n = w.len();
        let w = params.add("w", w.into_shape_with_order((n, 1)).expect("column"));
        Self { params, w }
    }
}

impl Critic for LinearCritic {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn score(&self, tape: &Tape, p: &Bound, x: Var, _a: Var) -> Var {
        tape.matmul(x, p.var(self.w))
    }

    fn input_gradient(&self, tape: &Tape, p: &Bound, x: Var, _a: Var) -> Var {
        let ones = tape.leaf(Mat::ones((tape.shape(x).0, 1)));
        tape.matmul_bt(ones, p.var(self.w))
    }
}

/// Leaky-rectifier perceptron over `concat(x, a)` ending in a scalar.
#[derive(Clone, Debug)]
pub struct MlpCritic {
    pub params: ParamStore,
    hidden: Vec<Linear>,
    out: Linear,
    feature_dim: usize,
    slope: f64,
}

impl MlpCritic {
    pub fn new(feature_dim: usize, semantic_dim: usize, config: &GanConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut params = ParamStore::new();
        let mut hidden = Vec::new();
        let mut width = feature_dim + semantic_dim;
        for i in 0..config.hidden_layers.max(1) {
            hidden.push(Linear::new(&mut params, rng, &format!("critic.fc{i}"), width, config.hidden_dim));
            width = config.hidden_dim;
        }
        let out = Linear::new(&mut params, rng, "critic.out", width, 1);
        Self {
            params,
            hidden,
            out,
            feature_dim,
            slope: config.leaky_slope,
        }
    }
}

impl Critic for MlpCritic {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn score(&self, tape: &Tape, p: &Bound, x: Var, a: Var) -> Var {
        let mut h = tape.concat_cols(&[x, a]);
        for l in &self.hidden {
            h = tape.unary(l.forward(tape, p, h), Unary::LeakyRelu(self.slope));
        }
        self.out.forward(tape, p, h)
    }

    fn input_gradient(&self, tape: &Tape, p: &Bound, x: Var, a: Var) -> Var {
        // forward pass for the activation masks; the masks are piecewise
        // constant, so treating them as constants is exact almost everywhere
        let mut h = tape.concat_cols(&[x, a]);
        let mut masks = Vec::with_capacity(self.hidden.len());
        for l in &self.hidden {
            let pre = l.forward(tape, p, h);
            let slope = self.slope;
            masks.push(tape.value(pre).mapv(|v| if v > 0.0 { 1.0 } else { slope }));
            h = tape.unary(pre, Unary::LeakyRelu(slope));
        }
        let batch = tape.shape(x).0;
        let ones = tape.leaf(Mat::ones((batch, 1)));
        let mut delta = tape.matmul_bt(ones, p.var(self.out.w));
        for (i, l) in self.hidden.iter().enumerate().rev() {
            delta = tape.mul(delta, tape.leaf(masks[i].clone()));
            let w = if i == 0 {
                tape.slice_rows(p.var(l.w), 0, self.feature_dim)
            } else {
                p.var(l.w)
            };
            delta = tape.matmul_bt(delta, w);
        }
        delta
    }
}

/// Leaky-rectifier perceptron `concat(z, a) -> feature`, linear output.
#[derive(Clone, Debug)]
pub struct Generator {
    pub params: ParamStore,
    hidden: Vec<Linear>,
    out: Linear,
    slope: f64,
    pub noise_dim: usize,
    pub feature_dim: usize,
}

impl Generator {
    pub fn new(feature_dim: usize, semantic_dim: usize, config: &GanConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut params = ParamStore::new();
        let mut hidden = Vec::new();
        let mut width = config.noise_dim + semantic_dim;
        for i in 0..config.hidden_layers.max(1) {
            hidden.push(Linear::new(&mut params, rng, &format!("generator.fc{i}"), width, config.hidden_dim));
            width = config.hidden_dim;
        }
        let out = Linear::new(&mut params, rng, "generator.out", width, feature_dim);
        Self {
            params,
            hidden,
            out,
            slope: config.leaky_slope,
            noise_dim: config.noise_dim,
            feature_dim,
        }
    }

    pub fn forward(&self, tape: &Tape, p: &Bound, z: Var, a: Var) -> Var {
        let mut h = tape.concat_cols(&[z, a]);
        for l in &self.hidden {
            h = tape.unary(l.forward(tape, p, h), Unary::LeakyRelu(self.slope));
        }
        self.out.forward(tape, p, h)
    }

    /// Plain evaluation.
    pub fn generate(&self, z: &Mat, a: &Mat) -> Mat {
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let zv = tape.leaf(z.clone());
        let av = tape.leaf(a.clone());
        let out = self.forward(&tape, &p, zv, av);
        let v = tape.value(out).clone();
        v
    }
}

pub fn standard_normal(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Mat {
    Mat::from_shape_fn(shape, |_| StandardNormal.sample(rng))
}

/// Two noise batches whose rows differ by at least `1e-8` in L1; offending
/// rows of the second batch are redrawn.
pub fn noise_pair(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> (Mat, Mat) {
    let z1 = standard_normal(rng, shape);
    let mut z2 = standard_normal(rng, shape);
    for i in 0..shape.0 {
        while (&z1.row(i) - &z2.row(i)).mapv(f64::abs).sum() < 1e-8 {
            for v in z2.row_mut(i).iter_mut() {
                *v = StandardNormal.sample(rng);
            }
        }
    }
    (z1, z2)
}

/// Parts of the critic objective.
pub struct CriticLoss {
    pub total: Var,
    pub wasserstein: f64,
    pub penalty: f64,
}

/// `E[D(fake,a)] - E[D(real,a)] + λ·E[(‖∇D(x̂,a)‖₂ - 1)²]`, with
/// `x̂ = ρ·real + (1-ρ)·fake` and one `ρ` per row.
pub fn critic_loss(
    tape: &Tape,
    critic: &dyn Critic,
    p: &Bound,
    real: Var,
    fake: Var,
    a: Var,
    rho: &[f64],
    lambda: f64,
) -> Result<CriticLoss> {
    let batch = tape.shape(real).0;
    assert_eq!(rho.len(), batch, "one interpolation weight per row");
    let d_real = tape.mean(critic.score(tape, p, real, a));
    let d_fake = tape.mean(critic.score(tape, p, fake, a));
    let wass = tape.sub(d_fake, d_real);
    let rho_col = tape.leaf(Mat::from_shape_vec((batch, 1), rho.to_vec()).expect("column"));
    let one_minus = tape.leaf(Mat::from_shape_fn((batch, 1), |(i, _)| 1.0 - rho[i]));
    let x_hat = tape.add(tape.mul_col(real, rho_col), tape.mul_col(fake, one_minus));
    let grad = critic.input_gradient(tape, p, x_hat, a);
    let sq = tape.sum_cols(tape.unary(grad, Unary::Square));
    let norm = tape.unary(tape.add_scalar(sq, 1e-12), Unary::Sqrt);
    if !tape.value(norm).iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical("non-finite critic gradient norm".into()));
    }
    let dev = tape.unary(tape.add_scalar(norm, -1.0), Unary::Square);
    let gp = tape.mean(dev);
    let total = tape.add(wass, tape.scale(gp, lambda));
    Ok(CriticLoss {
        total,
        wasserstein: tape.scalar_value(wass),
        penalty: tape.scalar_value(gp),
    })
}

/// Mean of `‖g₁ - g₂‖₁ / ‖z₁ - z₂‖₁` over rows.
pub fn mode_seeking_ratio(tape: &Tape, g1: Var, g2: Var, z1: &Mat, z2: &Mat) -> Result<Var> {
    let denom: Vec<f64> = z1
        .axis_iter(Axis(0))
        .zip(z2.axis_iter(Axis(0)))
        .map(|(a, b)| (&a - &b).mapv(f64::abs).sum())
        .collect();
    if denom.iter().any(|&d| d < 1e-8) {
        return Err(Error::Invalid("noise pair too close for the mode-seeking ratio".into()));
    }
    let inv = tape.leaf(Mat::from_shape_fn((denom.len(), 1), |(i, _)| 1.0 / denom[i]));
    let l1 = tape.sum_cols(tape.unary(tape.sub(g1, g2), Unary::Abs));
    Ok(tape.mean(tape.mul(l1, inv)))
}

pub struct GeneratorLoss {
    pub total: Var,
    pub adversarial: f64,
    pub mode_seeking: f64,
}

/// `-E[D(G(z₁,a),a)] - α·E[‖G(z₁,a)-G(z₂,a)‖₁/‖z₁-z₂‖₁]`
pub fn generator_loss(
    tape: &Tape,
    generator: &Generator,
    pg: &Bound,
    critic: &dyn Critic,
    pc: &Bound,
    z1: &Mat,
    z2: &Mat,
    a: Var,
    alpha: f64,
) -> Result<GeneratorLoss> {
    let z1v = tape.leaf(z1.clone());
    let z2v = tape.leaf(z2.clone());
    let g1 = generator.forward(tape, pg, z1v, a);
    let g2 = generator.forward(tape, pg, z2v, a);
    let adv = tape.scale(tape.mean(critic.score(tape, pc, g1, a)), -1.0);
    let ms = mode_seeking_ratio(tape, g1, g2, z1, z2)?;
    let total = tape.sub(adv, tape.scale(ms, alpha));
    Ok(GeneratorLoss {
        total,
        adversarial: tape.scalar_value(adv),
        mode_seeking: tape.scalar_value(ms),
    })
}

/// Trained generator and critic.
#[derive(Clone, Debug)]
pub struct GanBundle {
    pub config: GanConfig,
    pub generator: Generator,
    pub critic: MlpCritic,
    pub feature_dim: usize,
    pub semantic_dim: usize,
}

impl GanBundle {
    pub fn new(feature_dim: usize, semantic_dim: usize, config: &GanConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6a09_e667_f3bc_c908);
        let generator = Generator::new(feature_dim, semantic_dim, config, &mut rng);
        let critic = MlpCritic::new(feature_dim, semantic_dim, config, &mut rng);
        Ok(Self {
            config: config.clone(),
            generator,
            critic,
            feature_dim,
            semantic_dim,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GanReport {
    pub critic_losses: Vec<f64>,
    pub penalties: Vec<f64>,
    pub generator_losses: Vec<f64>,
    pub mode_seeking: Vec<f64>,
}

/// Real seen-class features with their class ids, plus one semantic row per
/// class id (rows of unused ids are ignored).
pub struct GanTrainingSet<'a> {
    pub features: &'a Mat,
    pub class_ids: &'a [usize],
    pub semantics: &'a Mat,
}

fn gather_rows(m: &Mat, idx: impl Iterator<Item = usize>) -> Mat {
    let idx: Vec<usize> = idx.collect();
    m.select(Axis(0), &idx)
}

/// Alternating WGAN-GP training: `critic_steps` critic updates per generator update.
pub fn train_gan(data: &GanTrainingSet<'_>, config: &GanConfig) -> Result<(GanBundle, GanReport)> {
    config.validate()?;
    let n = data.features.nrows();
    if n == 0 {
        return Err(Error::Invalid("no seen features to train the generator on".into()));
    }
    assert_eq!(n, data.class_ids.len());
    let feature_dim = data.features.ncols();
    let semantic_dim = data.semantics.ncols();
    let mut bundle = GanBundle::new(feature_dim, semantic_dim, config)?;
    let mut opt_g = Adam::new(config.adam(), &bundle.generator.params);
    let mut opt_d = Adam::new(config.adam(), &bundle.critic.params);

    // independent streams per purpose
    let mut batch_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut noise_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2));
    let mut rho_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(3));

    let bs = config.batch_size.min(n);
    let mut order = permutation(&mut batch_rng, n);
    let mut cursor = 0usize;
    let mut next_batch = |rng: &mut ChaCha8Rng| -> Vec<usize> {
        let mut out = Vec::with_capacity(bs);
        while out.len() < bs {
            if cursor == order.len() {
                order = permutation(rng, n);
                cursor = 0;
            }
            out.push(order[cursor]);
            cursor += 1;
        }
        out
    };

    let mut report = GanReport::default();
    for it in 0..config.iterations {
        for _ in 0..config.critic_steps {
            let idx = next_batch(&mut batch_rng);
            let real = gather_rows(data.features, idx.iter().copied());
            let a = gather_rows(data.semantics, idx.iter().map(|&i| data.class_ids[i]));
            let z = standard_normal(&mut noise_rng, (bs, config.noise_dim));
            let fake = bundle.generator.generate(&z, &a);
            let rho: Vec<f64> = (0..bs).map(|_| rho_rng.random::<f64>()).collect();
            let tape = Tape::new();
            let pc = bundle.critic.params.bind(&tape);
            let (rv, fv, av) = (tape.leaf(real), tape.leaf(fake), tape.leaf(a));
            let loss = critic_loss(&tape, &bundle.critic, &pc, rv, fv, av, &rho, config.lambda)?;
            let l = tape.scalar_value(loss.total);
            if !l.is_finite() || l.abs() > config.divergence_limit {
                return Err(Error::Numerical(format!(
                    "critic loss {l} exceeded the divergence limit at iteration {it}"
                )));
            }
            let grads = pc.grads(&bundle.critic.params, &tape.backward(loss.total));
            opt_d.step(&mut bundle.critic.params, &grads);
            report.critic_losses.push(l);
            report.penalties.push(loss.penalty);
        }

        let idx = next_batch(&mut batch_rng);
        let a = gather_rows(data.semantics, idx.iter().map(|&i| data.class_ids[i]));
        let (z1, z2) = noise_pair(&mut noise_rng, (bs, config.noise_dim));
        let tape = Tape::new();
        let pg = bundle.generator.params.bind(&tape);
        let pc = bundle.critic.params.bind(&tape);
        let av = tape.leaf(a);
        let loss = generator_loss(&tape, &bundle.generator, &pg, &bundle.critic, &pc, &z1, &z2, av, config.alpha)?;
        let l = tape.scalar_value(loss.total);
        if !l.is_finite() {
            return Err(Error::Numerical(format!("generator loss {l} at iteration {it}")));
        }
        let grads = pg.grads(&bundle.generator.params, &tape.backward(loss.total));
        opt_g.step(&mut bundle.generator.params, &grads);
        report.generator_losses.push(l);
        report.mode_seeking.push(loss.mode_seeking);
        if it % 200 == 0 {
            log::debug!(
                "gan iteration {it}: critic {:.4} generator {l:.4}",
                report.critic_losses.last().copied().unwrap_or(0.0)
            );
        }
    }
    Ok((bundle, report))
}

/// `n_per_class` generated features for every `(class_id, semantic)` pair,
/// class-major, each from fresh noise.
pub fn synthesize(
    bundle: &GanBundle,
    classes: &[(usize, Array1<f64>)],
    n_per_class: usize,
    seed: u64,
) -> Result<Vec<GestureFeature>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(classes.len() * n_per_class);
    for (class_id, sem) in classes {
        if sem.len() != bundle.semantic_dim {
            return Err(Error::Invalid(format!(
                "semantic vector of class {class_id} has {} entries, generator expects {}",
                sem.len(),
                bundle.semantic_dim
            )));
        }
        let mut done = 0;
        while done < n_per_class {
            let b = (n_per_class - done).min(256);
            let z = standard_normal(&mut rng, (b, bundle.generator.noise_dim));
            let a = sem.broadcast((b, sem.len())).expect("broadcast").to_owned();
            let feats = bundle.generator.generate(&z, &a);
            for (i, row) in feats.axis_iter(Axis(0)).enumerate() {
                out.push(GestureFeature {
                    data: row.to_owned(),
                    sample_id: format!("syn_{class_id}_{:05}", done + i),
                    class_id: Some(*class_id),
                });
            }
            done += b;
        }
    }
    if out.iter().any(|f| f.data.iter().any(|v| !v.is_finite())) {
        return Err(Error::Numerical("generator produced non-finite features".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> GanConfig {
        GanConfig {
            noise_dim: 4,
            hidden_dim: 16,
            batch_size: 8,
            iterations: 10,
            ..GanConfig::default()
        }
    }

    #[test]
    fn zero_critic_and_no_penalty_gives_zero_loss() {
        let critic = LinearCritic::new(Array1::zeros(3));
        let tape = Tape::new();
        let p = critic.params.bind(&tape);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let real = tape.leaf(standard_normal(&mut rng, (5, 3)));
        let fake = tape.leaf(standard_normal(&mut rng, (5, 3)));
        let a = tape.leaf(Mat::zeros((5, 2)));
        let l = critic_loss(&tape, &critic, &p, real, fake, a, &[0.5; 5], 0.0).unwrap();
        assert_eq!(tape.scalar_value(l.total), 0.0);
    }

    #[test]
    fn linear_critic_penalty_closed_form() {
        let w = Array1::from_vec(vec![2.0, 0.0, 0.0]);
        let critic = LinearCritic::new(w);
        let tape = Tape::new();
        let p = critic.params.bind(&tape);
        let x = Mat::from_shape_vec((2, 3), vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0]).unwrap();
        let (real, fake) = (tape.leaf(x.clone()), tape.leaf(x));
        let a = tape.leaf(Mat::zeros((2, 1)));
        let l = critic_loss(&tape, &critic, &p, real, fake, a, &[0.3, 0.9], 1.0).unwrap();
        assert!((tape.scalar_value(l.total) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn larger_score_gap_lowers_the_loss() {
        let critic = LinearCritic::new(Array1::from_vec(vec![1.0, -1.0]));
        let mut last = f64::INFINITY;
        for gap in [0.0, 0.5, 1.0, 2.0] {
            let tape = Tape::new();
            let p = critic.params.bind(&tape);
            let real = tape.leaf(Mat::from_shape_vec((1, 2), vec![gap, 0.0]).unwrap());
            let fake = tape.leaf(Mat::zeros((1, 2)));
            let a = tape.leaf(Mat::zeros((1, 1)));
            let l = tape.scalar_value(critic_loss(&tape, &critic, &p, real, fake, a, &[0.5], 0.0).unwrap().total);
            assert!(l < last);
            last = l;
        }
    }

    #[test]
    fn mlp_critic_input_gradient_matches_finite_differences() {
        let cfg = GanConfig {
            hidden_dim: 7,
            ..tiny_config()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let critic = MlpCritic::new(3, 2, &cfg, &mut rng);
        let x = standard_normal(&mut rng, (4, 3));
        let a = standard_normal(&mut rng, (4, 2));
        let tape = Tape::new();
        let p = critic.params.bind(&tape);
        let (xv, av) = (tape.leaf(x.clone()), tape.leaf(a.clone()));
        let g = tape.value(critic.input_gradient(&tape, &p, xv, av)).clone();
        let score = |x: &Mat| {
            let t = Tape::new();
            let p = critic.params.bind(&t);
            let (xv, av) = (t.leaf(x.clone()), t.leaf(a.clone()));
            let s = critic.score(&t, &p, xv, av);
            let v = t.value(s).clone();
            v
        };
        let eps = 1e-6;
        for i in 0..4 {
            for j in 0..3 {
                let mut xp = x.clone();
                xp[[i, j]] += eps;
                let mut xm = x.clone();
                xm[[i, j]] -= eps;
                let fd = (score(&xp)[[i, 0]] - score(&xm)[[i, 0]]) / (2.0 * eps);
                assert!((fd - g[[i, j]]).abs() < 1e-6, "{fd} vs {}", g[[i, j]]);
            }
        }
    }

    #[test]
    fn penalty_parameter_gradient_matches_finite_differences() {
        let cfg = GanConfig {
            hidden_dim: 5,
            ..tiny_config()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let critic = MlpCritic::new(3, 2, &cfg, &mut rng);
        let real = standard_normal(&mut rng, (4, 3));
        let fake = standard_normal(&mut rng, (4, 3));
        let a = standard_normal(&mut rng, (4, 2));
        let rho = [0.1, 0.4, 0.6, 0.95];
        let eval = |c: &MlpCritic| {
            let tape = Tape::new();
            let p = c.params.bind(&tape);
            let (r, f, av) = (tape.leaf(real.clone()), tape.leaf(fake.clone()), tape.leaf(a.clone()));
            let l = critic_loss(&tape, c, &p, r, f, av, &rho, 10.0).unwrap();
            let grads = p.grads(&c.params, &tape.backward(l.total));
            (tape.scalar_value(l.total), grads)
        };
        let (_, grads) = eval(&critic);
        let eps = 1e-6;
        for id in critic.params.ids() {
            for k in [0usize, 3] {
                if k >= critic.params.get(id).len() {
                    continue;
                }
                let mut cp = critic.clone();
                cp.params.get_mut(id).as_slice_mut().unwrap()[k] += eps;
                let mut cm = critic.clone();
                cm.params.get_mut(id).as_slice_mut().unwrap()[k] -= eps;
                let fd = (eval(&cp).0 - eval(&cm).0) / (2.0 * eps);
                let an = grads[critic.params.ids().position(|x| x == id).unwrap()].as_slice().unwrap()[k];
                assert!((fd - an).abs() < 1e-5 * (1.0 + fd.abs()), "{}: {fd} vs {an}", critic.params.name(id));
            }
        }
    }

    #[test]
    fn mode_seeking_ratio_of_simple_generators() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (z1, z2) = noise_pair(&mut rng, (10, 5));
        let tape = Tape::new();
        let (a, b) = (tape.leaf(z1.clone()), tape.leaf(z2.clone()));
        let identity = mode_seeking_ratio(&tape, a, b, &z1, &z2).unwrap();
        assert!((tape.scalar_value(identity) - 1.0).abs() < 1e-12);
        for c in [0.5, 2.0, 3.0, -2.0] {
            let (ca, cb) = (tape.scale(a, c), tape.scale(b, c));
            let r = mode_seeking_ratio(&tape, ca, cb, &z1, &z2).unwrap();
            assert!((tape.scalar_value(r) - f64::abs(c)).abs() < 1e-12);
        }
        // a generator that ignores z
        let f = tape.leaf(Mat::ones((10, 3)));
        let r = mode_seeking_ratio(&tape, f, f, &z1, &z2).unwrap();
        assert_eq!(tape.scalar_value(r), 0.0);
        assert!(mode_seeking_ratio(&tape, a, a, &z1, &z1).is_err());
    }

    #[test]
    fn one_descent_step_lowers_a_toy_critic_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let real = standard_normal(&mut rng, (16, 2)) + 1.0;
        let fake = standard_normal(&mut rng, (16, 2)) - 1.0;
        let rho: Vec<f64> = (0..16).map(|_| rng.random()).collect();
        let eval = |w: &Array1<f64>| {
            let critic = LinearCritic::new(w.clone());
            let tape = Tape::new();
            let p = critic.params.bind(&tape);
            let (r, f, a) = (tape.leaf(real.clone()), tape.leaf(fake.clone()), tape.leaf(Mat::zeros((16, 1))));
            let l = critic_loss(&tape, &critic, &p, r, f, a, &rho, 10.0).unwrap();
            let g = p.grads(&critic.params, &tape.backward(l.total));
            (tape.scalar_value(l.total), g[0].column(0).to_owned())
        };
        let w = Array1::from_vec(vec![0.3, -0.2]);
        let (l0, g) = eval(&w);
        let (l1, _) = eval(&(&w - &(g * 1e-3)));
        assert!(l1 < l0);
    }

    #[test]
    fn synthesis_counts_and_determinism() {
        let bundle = GanBundle::new(6, 3, &tiny_config()).unwrap();
        let classes: Vec<(usize, Array1<f64>)> = (0..6).map(|c| (c + 10, Array1::from_elem(3, c as f64))).collect();
        let a = synthesize(&bundle, &classes, 400, 1).unwrap();
        assert_eq!(a.len(), 2400);
        assert!(a.iter().all(|f| f.data.len() == 6 && f.data.iter().all(|v| v.is_finite())));
        assert_eq!(a.iter().filter(|f| f.class_id == Some(12)).count(), 400);
        assert_eq!(a, synthesize(&bundle, &classes, 400, 1).unwrap());
        assert_ne!(a, synthesize(&bundle, &classes, 400, 2).unwrap());
    }

    #[test]
    fn config_validation() {
        let bad = GanConfig {
            critic_steps: 0,
            ..GanConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = GanConfig {
            lambda: -1.0,
            ..GanConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let feats = standard_normal(&mut rng, (20, 4));
        let ids: Vec<usize> = (0..20).map(|i| i % 2).collect();
        let sem = standard_normal(&mut rng, (2, 3));
        let data = GanTrainingSet {
            features: &feats,
            class_ids: &ids,
            semantics: &sem,
        };
        let (a, ra) = train_gan(&data, &tiny_config()).unwrap();
        let (b, rb) = train_gan(&data, &tiny_config()).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a.generator.params.get(a.generator.out.w), b.generator.params.get(b.generator.out.w));
        assert_eq!(ra.critic_losses.len(), 50);
    }

    fn two_class_fit() -> (GanBundle, Mat, Mat) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let means = Mat::from_shape_vec((2, 4), vec![2.0, 2.0, 0.0, 0.0, -2.0, 0.0, -2.0, 1.0]).unwrap();
        let n = 200;
        let mut feats = standard_normal(&mut rng, (n, 4)) * 0.3;
        let ids: Vec<usize> = (0..n).map(|i| i % 2).collect();
        for (i, &c) in ids.iter().enumerate() {
            let mut r = feats.row_mut(i);
            r += &means.row(c);
        }
        let sem = Mat::from_shape_vec((2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let cfg = GanConfig {
            noise_dim: 4,
            hidden_dim: 32,
            batch_size: 32,
            iterations: 400,
            lr: 1e-3,
            ..GanConfig::default()
        };
        let data = GanTrainingSet {
            features: &feats,
            class_ids: &ids,
            semantics: &sem,
        };
        (train_gan(&data, &cfg).unwrap().0, means, sem)
    }

    fn class_mean_distance(bundle: &GanBundle, means: &Mat, sem: &Mat, swap: bool) -> f64 {
        let classes: Vec<(usize, Array1<f64>)> = (0..2)
            .map(|c| (c, sem.row(if swap { 1 - c } else { c }).to_owned()))
            .collect();
        let syn = synthesize(bundle, &classes, 300, 3).unwrap();
        (0..2)
            .map(|c| {
                let rows: Vec<_> = syn.iter().filter(|f| f.class_id == Some(c)).collect();
                let mut m = Array1::<f64>::zeros(4);
                for f in &rows {
                    m += &f.data;
                }
                m /= rows.len() as f64;
                (&m - &means.row(c)).mapv(|v| v * v).sum().sqrt()
            })
            .sum::<f64>()
            / 2.0
    }

    #[test]
    fn generated_class_means_track_real_means_and_depend_on_the_condition() {
        let (bundle, means, sem) = two_class_fit();
        let gap = (&means.row(0) - &means.row(1)).mapv(|v| v * v).sum().sqrt();
        let own = class_mean_distance(&bundle, &means, &sem, false);
        let swapped = class_mean_distance(&bundle, &means, &sem, true);
        assert!(own < 0.5 * gap, "own {own} gap {gap}");
        assert!(swapped > own + 0.25 * gap, "own {own} swapped {swapped}");
    }
}
