//! Linear-softmax and one-hidden-layer tanh classifiers with analytic
//! gradients, plus the class-conditional head used by group classifiers.
//!
//! The class-conditional head adds `log P(group | class)` to the network
//! logits and masks groups outside the known class with minus infinity, so
//! the softmax runs over the in-class groups only.

use std::io::{BufRead, Write};

use rand_distr::{Distribution, Normal};

use crate::dataset::format_f64;
use crate::error::{Error, Result};
use crate::loss::{self, LossConfig, LossKind};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Linear,
    Mlp1 { hidden: usize },
}

impl Arch {
    pub const DEFAULT_HIDDEN: usize = 32;

    pub fn mlp1() -> Self {
        Arch::Mlp1 {
            hidden: Self::DEFAULT_HIDDEN,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Arch::Linear),
            "mlp1" => Ok(Arch::mlp1()),
            other => {
                if let Some(h) = other.strip_prefix("mlp1:") {
                    let hidden = h
                        .parse()
                        .map_err(|_| Error::Parameter(format!("bad hidden width `{h}`")))?;
                    return Ok(Arch::Mlp1 { hidden });
                }
                Err(Error::Parameter(format!("unknown architecture `{other}`")))
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Arch::Linear => "linear",
            Arch::Mlp1 { .. } => "mlp1",
        }
    }
}

/// Parameters of a classifier with `outputs` classes over `input_dim` features.
///
/// For `Linear`, `w1`/`b1` are empty and `w2` is `outputs x input_dim`.
/// For `Mlp1`, `w1` is `hidden x input_dim` and `w2` is `outputs x hidden`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: Arch,
    pub input_dim: usize,
    pub outputs: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(arch: Arch, input_dim: usize, outputs: usize) -> Self {
        let (h1, in2) = match arch {
            Arch::Linear => (0, input_dim),
            Arch::Mlp1 { hidden } => (hidden, hidden),
        };
        Self {
            arch,
            input_dim,
            outputs,
            w1: vec![0.0; h1 * input_dim],
            b1: vec![0.0; h1],
            w2: vec![0.0; outputs * in2],
            b2: vec![0.0; outputs],
        }
    }

    /// Zero biases, weights i.i.d. `N(0, 1/fan_in)`.
    pub fn init(arch: Arch, input_dim: usize, outputs: usize, rng: &mut Rng) -> Self {
        let mut p = Self::zeros(arch, input_dim, outputs);
        let fill = |w: &mut [f64], fan_in: usize, rng: &mut Rng| {
            let normal = Normal::new(0.0, (1.0 / fan_in.max(1) as f64).sqrt()).unwrap();
            for v in w.iter_mut() {
                *v = normal.sample(rng);
            }
        };
        fill(&mut p.w1, input_dim, rng);
        let in2 = p.layer2_inputs();
        fill(&mut p.w2, in2, rng);
        p
    }

    pub fn hidden(&self) -> usize {
        match self.arch {
            Arch::Linear => 0,
            Arch::Mlp1 { hidden } => hidden,
        }
    }

    fn layer2_inputs(&self) -> usize {
        match self.arch {
            Arch::Linear => self.input_dim,
            Arch::Mlp1 { hidden } => hidden,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.arch, self.input_dim, self.outputs)
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.w1
            .iter()
            .chain(&self.b1)
            .chain(&self.w2)
            .chain(&self.b2)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w1
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.iter_mut())
            .chain(self.b2.iter_mut())
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    /// `self += a * other`
    pub fn axpy(&mut self, a: f64, other: &ModelParams) {
        for (x, y) in self.values_mut().zip(other.values()) {
            *x += a * y;
        }
    }

    /// Multiplies the weight matrices (not the biases) by `factor`.
    pub fn shrink_weights(&mut self, factor: f64) {
        self.w1.iter_mut().chain(self.w2.iter_mut()).for_each(|w| *w *= factor);
    }

    pub fn norm(&self) -> f64 {
        self.values().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::Shape(format!(
                "input has {} features, model expects {}",
                x.len(),
                self.input_dim
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Class conditioning

/// `prior_logits[y][g] = log P(z = g | y)`, minus infinity outside class `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassConditioning {
    pub prior_logits: Vec<Vec<f64>>,
}

impl ClassConditioning {
    pub fn num_groups(&self) -> usize {
        self.prior_logits.first().map_or(0, Vec::len)
    }

    pub fn num_classes(&self) -> usize {
        self.prior_logits.len()
    }

    pub fn is_allowed(&self, class: usize, group: usize) -> bool {
        self.prior_logits[class][group].is_finite()
    }
}

/// Empirical class-conditional group priors from group-labeled rows.
///
/// Within a class where every group was observed this is `count_g / count_y`.
/// If some in-class group has zero count, the whole class switches to add-one
/// smoothing, `(count_g + 1) / (count_y + G_y)`; a class absent from the rows
/// therefore falls back to the uniform prior over its groups.
pub fn fit_conditioning(
    classes: &[usize],
    groups: &[usize],
    class_of_group: &[usize],
    num_classes: usize,
) -> Result<ClassConditioning> {
    if classes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if classes.len() != groups.len() {
        return Err(Error::Shape("class and group label counts differ".into()));
    }
    let g_count = class_of_group.len();
    let mut counts = vec![vec![0usize; g_count]; num_classes];
    for (&y, &z) in classes.iter().zip(groups) {
        counts[y][z] += 1;
    }
    let mut prior_logits = vec![vec![f64::NEG_INFINITY; g_count]; num_classes];
    for y in 0..num_classes {
        let members: Vec<usize> = (0..g_count).filter(|&g| class_of_group[g] == y).collect();
        let total: usize = members.iter().map(|&g| counts[y][g]).sum();
        let smooth = members.iter().any(|&g| counts[y][g] == 0);
        for &g in &members {
            let p = if smooth {
                (counts[y][g] + 1) as f64 / (total + members.len()) as f64
            } else {
                counts[y][g] as f64 / total as f64
            };
            prior_logits[y][g] = p.ln();
        }
    }
    Ok(ClassConditioning { prior_logits })
}

// ---------------------------------------------------------------------------
// Forward pass

/// Softmax that treats minus-infinity logits as masked (probability 0).
pub fn masked_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits
        .iter()
        .cloned()
        .filter(|v| v.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits
        .iter()
        .map(|&l| if l.is_finite() { (l - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    out
}

fn hidden_layer(params: &ModelParams, x: &[f64]) -> Vec<f64> {
    let d = params.input_dim;
    (0..params.hidden())
        .map(|j| {
            let row = &params.w1[j * d..(j + 1) * d];
            let z: f64 = row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + params.b1[j];
            z.tanh()
        })
        .collect()
}

fn output_logits(params: &ModelParams, input: &[f64]) -> Vec<f64> {
    let m = input.len();
    (0..params.outputs)
        .map(|k| {
            let row = &params.w2[k * m..(k + 1) * m];
            row.iter().zip(input).map(|(w, v)| w * v).sum::<f64>() + params.b2[k]
        })
        .collect()
}

struct Activations {
    hidden: Vec<f64>,
    probs: Vec<f64>,
    masked: Vec<bool>,
}

fn activations(
    params: &ModelParams,
    x: &[f64],
    cond: Option<(&ClassConditioning, usize)>,
) -> Result<Activations> {
    params.check_input(x)?;
    let hidden = hidden_layer(params, x);
    let layer_in: &[f64] = if params.hidden() == 0 { x } else { &hidden };
    let mut logits = output_logits(params, layer_in);
    let mut masked = vec![false; params.outputs];
    if let Some((c, y)) = cond {
        if c.num_groups() != params.outputs {
            return Err(Error::Shape(format!(
                "conditioning over {} groups, model has {} outputs",
                c.num_groups(),
                params.outputs
            )));
        }
        if y >= c.num_classes() {
            return Err(Error::LabelRange {
                label: y,
                groups: c.num_classes(),
            });
        }
        for (k, (l, &prior)) in logits.iter_mut().zip(&c.prior_logits[y]).enumerate() {
            if prior.is_finite() {
                *l += prior;
            } else {
                *l = f64::NEG_INFINITY;
                masked[k] = true;
            }
        }
    }
    Ok(Activations {
        probs: masked_softmax(&logits),
        hidden,
        masked,
    })
}

/// Predicted probability vector for one input.
pub fn forward(
    params: &ModelParams,
    x: &[f64],
    cond: Option<(&ClassConditioning, usize)>,
) -> Result<Vec<f64>> {
    Ok(activations(params, x, cond)?.probs)
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (k, &p) in v.iter().enumerate().skip(1) {
        if p > v[best] {
            best = k;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Gradients

/// Per-row losses and cached activations of one batch; gradients are formed
/// afterwards for any choice of row weights.
pub struct BatchEval {
    pub losses: Vec<f64>,
    /// Whether the argmax prediction equals the target.
    pub correct: Vec<bool>,
    inputs: Vec<Vec<f64>>,
    hidden: Vec<Vec<f64>>,
    dlogits: Vec<Vec<f64>>,
}

/// Conditioning for a batch: one class label per row.
pub type BatchConditioning<'a> = Option<(&'a ClassConditioning, &'a [usize])>;

pub fn eval_batch(
    params: &ModelParams,
    xs: &[&[f64]],
    targets: &[usize],
    loss_cfg: &LossConfig,
    cond: BatchConditioning<'_>,
) -> Result<BatchEval> {
    if xs.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} rows against {} targets",
            xs.len(),
            targets.len()
        )));
    }
    if let Some((_, classes)) = cond {
        if classes.len() != xs.len() {
            return Err(Error::Shape("one class label per row required".into()));
        }
    }
    let mut out = BatchEval {
        losses: Vec::with_capacity(xs.len()),
        correct: Vec::with_capacity(xs.len()),
        inputs: Vec::with_capacity(xs.len()),
        hidden: Vec::with_capacity(xs.len()),
        dlogits: Vec::with_capacity(xs.len()),
    };
    for (i, (&x, &t)) in xs.iter().zip(targets).enumerate() {
        if t >= params.outputs {
            return Err(Error::LabelRange {
                label: t,
                groups: params.outputs,
            });
        }
        let act = activations(params, x, cond.map(|(c, ys)| (c, ys[i])))?;
        if act.masked[t] && loss_cfg.kind == LossKind::TruncatedCe {
            return Err(Error::DegenerateTarget { target: t });
        }
        let mut d = vec![0.0; params.outputs];
        loss::logit_grad(loss_cfg, &act.probs, t, &mut d);
        for (g, &m) in d.iter_mut().zip(&act.masked) {
            if m {
                *g = 0.0;
            }
        }
        out.losses.push(loss::loss_value(loss_cfg, &act.probs, t));
        out.correct.push(argmax(&act.probs) == t);
        out.inputs.push(x.to_vec());
        out.hidden.push(act.hidden);
        out.dlogits.push(d);
    }
    Ok(out)
}

/// Gradient of `sum_i weights[i] * loss_i` for a previously evaluated batch.
pub fn backprop(params: &ModelParams, eval: &BatchEval, weights: &[f64]) -> ModelParams {
    let mut g = params.zeros_like();
    let d = params.input_dim;
    let h = params.hidden();
    for (i, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let x = &eval.inputs[i];
        let dl = &eval.dlogits[i];
        let layer_in: &[f64] = if h == 0 { x } else { &eval.hidden[i] };
        let m = layer_in.len();
        for (k, &dk) in dl.iter().enumerate() {
            if dk == 0.0 {
                continue;
            }
            let s = w * dk;
            g.b2[k] += s;
            for (gw, &a) in g.w2[k * m..(k + 1) * m].iter_mut().zip(layer_in) {
                *gw += s * a;
            }
        }
        if h > 0 {
            let a = &eval.hidden[i];
            for j in 0..h {
                let mut da = 0.0;
                for (k, &dk) in dl.iter().enumerate() {
                    da += params.w2[k * h + j] * dk;
                }
                let dz = w * da * (1.0 - a[j] * a[j]);
                if dz == 0.0 {
                    continue;
                }
                g.b1[j] += dz;
                for (gw, &xv) in g.w1[j * d..(j + 1) * d].iter_mut().zip(x) {
                    *gw += dz * xv;
                }
            }
        }
    }
    g
}

/// Gradient of `sum_i weights[i] * loss(forward(x_i), t_i)`.
pub fn grad(
    params: &ModelParams,
    xs: &[&[f64]],
    targets: &[usize],
    weights: &[f64],
    loss_cfg: &LossConfig,
    cond: BatchConditioning<'_>,
) -> Result<ModelParams> {
    if weights.len() != xs.len() {
        return Err(Error::Shape("one weight per row required".into()));
    }
    if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        return Err(Error::Parameter(format!("row weight {w} is not finite and nonnegative")));
    }
    let eval = eval_batch(params, xs, targets, loss_cfg, cond)?;
    Ok(backprop(params, &eval, weights))
}

/// Central finite-difference estimate of [`grad`] with step `h`.
pub fn numerical_grad(
    params: &ModelParams,
    xs: &[&[f64]],
    targets: &[usize],
    weights: &[f64],
    loss_cfg: &LossConfig,
    cond: BatchConditioning<'_>,
    h: f64,
) -> Result<ModelParams> {
    let objective = |p: &ModelParams| -> Result<f64> {
        let eval = eval_batch(p, xs, targets, loss_cfg, cond)?;
        Ok(eval.losses.iter().zip(weights).map(|(l, w)| l * w).sum())
    };
    let mut out = params.zeros_like();
    let mut probe = params.clone();
    let n = params.num_params();
    for k in 0..n {
        let orig = *probe.values().nth(k).expect("index in range");
        *probe.values_mut().nth(k).expect("index in range") = orig + h;
        let up = objective(&probe)?;
        *probe.values_mut().nth(k).expect("index in range") = orig - h;
        let down = objective(&probe)?;
        *probe.values_mut().nth(k).expect("index in range") = orig;
        *out.values_mut().nth(k).expect("index in range") = (up - down) / (2.0 * h);
    }
    Ok(out)
}

/// `‖a - b‖ / sqrt(‖a‖² + ‖b‖²)` over the flattened parameters, with the
/// denominator floored at 1e-12.
pub fn relative_error(a: &ModelParams, b: &ModelParams) -> f64 {
    let (mut diff, mut scale) = (0.0, 0.0);
    for (x, y) in a.values().zip(b.values()) {
        diff += (x - y) * (x - y);
        scale += x * x + y * y;
    }
    diff.sqrt() / scale.sqrt().max(1e-12)
}

// ---------------------------------------------------------------------------
// Checkpoint format
//
//   kind <linear|mlp1> d h K
//   w1 / b1 / w2 / b2 sections, one matrix row per line

pub fn write_params<W: Write>(mut w: W, p: &ModelParams) -> std::io::Result<()> {
    writeln!(
        w,
        "kind {} {} {} {}",
        p.arch.name(),
        p.input_dim,
        p.hidden(),
        p.outputs
    )?;
    let mut section = |name: &str, values: &[f64], cols: usize| -> std::io::Result<()> {
        writeln!(w, "{name}")?;
        if cols == 0 {
            return Ok(());
        }
        for row in values.chunks(cols) {
            let line: Vec<String> = row.iter().map(|v| format_f64(*v)).collect();
            writeln!(w, "{}", line.join(" "))?;
        }
        Ok(())
    };
    section("w1", &p.w1, p.input_dim)?;
    section("b1", &p.b1, p.b1.len())?;
    section("w2", &p.w2, p.layer2_inputs())?;
    section("b2", &p.b2, p.b2.len())
}

pub fn read_params<R: BufRead>(r: R) -> Result<ModelParams> {
    let lines: Vec<String> = r
        .lines()
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::Parse(e.to_string()))?;
    let header: Vec<&str> = lines
        .first()
        .ok_or_else(|| Error::Parse("empty checkpoint".into()))?
        .split_whitespace()
        .collect();
    if header.len() != 5 || header[0] != "kind" {
        return Err(Error::Parse("header must be `kind <arch> d h K`".into()));
    }
    let num = |s: &str| -> Result<usize> { s.parse().map_err(|_| Error::Parse(format!("bad count `{s}`"))) };
    let (d, h, k) = (num(header[2])?, num(header[3])?, num(header[4])?);
    let arch = match header[1] {
        "linear" => Arch::Linear,
        "mlp1" => Arch::Mlp1 { hidden: h },
        other => return Err(Error::Parse(format!("unknown kind `{other}`"))),
    };
    let mut p = ModelParams::zeros(arch, d, k);
    let mut filled: Vec<f64> = Vec::new();
    let mut sections: Vec<(String, Vec<f64>)> = Vec::new();
    for line in &lines[1..] {
        let t = line.trim();
        if matches!(t, "w1" | "b1" | "w2" | "b2") {
            if let Some((_, v)) = sections.last_mut() {
                v.append(&mut filled);
            }
            sections.push((t.to_string(), Vec::new()));
            continue;
        }
        for f in t.split_whitespace() {
            filled.push(f.parse().map_err(|_| Error::Parse(format!("bad value `{f}`")))?);
        }
    }
    if let Some((_, v)) = sections.last_mut() {
        v.append(&mut filled);
    }
    for (name, values) in sections {
        let target = match name.as_str() {
            "w1" => &mut p.w1,
            "b1" => &mut p.b1,
            "w2" => &mut p.w2,
            _ => &mut p.b2,
        };
        if values.len() != target.len() {
            return Err(Error::Parse(format!(
                "section {name}: {} values, expected {}",
                values.len(),
                target.len()
            )));
        }
        *target = values;
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn zero_params_give_uniform_output() {
        for arch in [Arch::Linear, Arch::mlp1()] {
            let p = ModelParams::zeros(arch, 3, 5);
            let probs = forward(&p, &[0.3, -1.0, 2.0], None).unwrap();
            assert!(probs.iter().all(|&v| (v - 0.2).abs() < 1e-15));
        }
    }

    #[test]
    fn conditioned_zero_params_mask_other_class() {
        let cond = fit_conditioning(&[0, 0, 1, 1], &[0, 1, 2, 3], &[0, 0, 1, 1], 2).unwrap();
        let p = ModelParams::zeros(Arch::Linear, 2, 4);
        let probs = forward(&p, &[1.0, 1.0], Some((&cond, 0))).unwrap();
        assert_eq!(probs, vec![0.5, 0.5, 0.0, 0.0]);
        let probs = forward(&p, &[1.0, 1.0], Some((&cond, 1))).unwrap();
        assert_eq!(probs, vec![0.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn forward_matches_independent_normalisation() {
        // p_k = 1 / sum_j exp(l_j - l_k), a different route to the softmax.
        let mut r = rng::stream(11, 0);
        for _ in 0..50 {
            let p = ModelParams::init(Arch::mlp1(), 4, 6, &mut r);
            let x = [0.5, -1.5, 2.0, 0.1];
            let probs = forward(&p, &x, None).unwrap();
            let hidden = hidden_layer(&p, &x);
            let logits = output_logits(&p, &hidden);
            for (k, &pk) in probs.iter().enumerate() {
                let denom: f64 = logits.iter().map(|l| (l - logits[k]).exp()).sum();
                assert!((pk - 1.0 / denom).abs() < 1e-14);
            }
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fit_conditioning_cases() {
        // balanced budget: uniform within each class
        let cond = fit_conditioning(&[0, 0, 1, 1, 0, 0, 1, 1], &[0, 1, 2, 3, 0, 1, 2, 3], &[0, 0, 1, 1], 2).unwrap();
        assert!((cond.prior_logits[0][0] - 0.5f64.ln()).abs() < 1e-15);
        assert!((cond.prior_logits[1][3] - 0.5f64.ln()).abs() < 1e-15);
        assert_eq!(cond.prior_logits[0][2], f64::NEG_INFINITY);

        // counts (9, 1) within class 0
        let mut classes = vec![0; 10];
        let mut groups = vec![0; 9];
        groups.push(1);
        classes.extend([1, 1]);
        groups.extend([2, 3]);
        let cond = fit_conditioning(&classes, &groups, &[0, 0, 1, 1], 2).unwrap();
        assert!((cond.prior_logits[0][0] - 0.9f64.ln()).abs() < 1e-15);
        assert!((cond.prior_logits[0][1] - 0.1f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn fit_conditioning_smooths_missing_groups() {
        // class 0 saw only group 0 (3 times); class 1 absent
        let cond = fit_conditioning(&[0, 0, 0], &[0, 0, 0], &[0, 0, 1, 1, 1], 2).unwrap();
        assert!((cond.prior_logits[0][0] - (4.0f64 / 5.0).ln()).abs() < 1e-15);
        assert!((cond.prior_logits[0][1] - (1.0f64 / 5.0).ln()).abs() < 1e-15);
        for g in 2..5 {
            assert!((cond.prior_logits[1][g] - (1.0f64 / 3.0).ln()).abs() < 1e-15);
        }
        for y in 0..2 {
            let s: f64 = cond.prior_logits[y].iter().filter(|v| v.is_finite()).map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(fit_conditioning(&[], &[], &[0, 1], 2).is_err());
    }

    #[test]
    fn zero_weights_give_zero_gradient() {
        let mut r = rng::stream(1, 0);
        let p = ModelParams::init(Arch::mlp1(), 3, 4, &mut r);
        let xs = [[0.1, 0.2, 0.3], [1.0, -1.0, 0.0]];
        let rows: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
        let g = grad(&p, &rows, &[0, 3], &[0.0, 0.0], &LossConfig::default(), None).unwrap();
        assert!(g.values().all(|&v| v == 0.0));
    }

    #[test]
    fn masked_ce_target_is_degenerate() {
        let cond = fit_conditioning(&[0, 1], &[0, 1], &[0, 1], 2).unwrap();
        let p = ModelParams::zeros(Arch::Linear, 1, 2);
        let rows: Vec<&[f64]> = vec![&[0.0]];
        let err = grad(&p, &rows, &[1], &[1.0], &LossConfig::default(), Some((&cond, &[0]))).unwrap_err();
        assert_eq!(err, Error::DegenerateTarget { target: 1 });
        // squared loss is defined there
        assert!(grad(&p, &rows, &[1], &[1.0], &LossConfig::squared(), Some((&cond, &[0]))).is_ok());
    }

    #[test]
    fn shape_errors() {
        let p = ModelParams::zeros(Arch::Linear, 2, 3);
        assert!(matches!(forward(&p, &[1.0], None), Err(Error::Shape(_))));
        let cond = fit_conditioning(&[0], &[0], &[0, 1], 2).unwrap();
        assert!(matches!(forward(&p, &[1.0, 2.0], Some((&cond, 0))), Err(Error::Shape(_))));
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.25, 0.25, 0.5, 0.5]), 2);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut r = rng::stream(3, 0);
        for arch in [Arch::Linear, Arch::Mlp1 { hidden: 5 }] {
            let p = ModelParams::init(arch, 4, 3, &mut r);
            let mut buf = Vec::new();
            write_params(&mut buf, &p).unwrap();
            let back = read_params(buf.as_slice()).unwrap();
            assert_eq!(p, back);
        }
    }
}
