use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AutogradError, Graph, ParamBundle, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Worst `|analytic - numeric| / max(|analytic|, |numeric|, 1e-5)` over checked coordinates.
    pub max_rel_err: f64,
    pub checked: usize,
    /// `(input index, coordinate)` pairs skipped because a kink lies within `h`.
    pub skipped: Vec<(usize, usize)>,
}

impl GradCheckReport {
    fn new() -> Self {
        GradCheckReport { max_rel_err: 0.0, checked: 0, skipped: Vec::new() }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err <= tol
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-5)
}

/// Reduces `out` to a scalar with fixed random weights when it is not one already.
fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var, AutogradError> {
    if g.value(out).len() == 1 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let shape = g.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let r = Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let r = g.constant(r);
    let prod = g.mul(out, r)?;
    Ok(g.sum(prod))
}

/// Kink test from one-sided slopes: disagreement beyond 1% means a kink lies within `h`.
fn is_kink(f_plus: f64, f0: f64, f_minus: f64, h: f64) -> bool {
    let sp = (f_plus - f0) / h;
    let sm = (f0 - f_minus) / h;
    (sp - sm).abs() > 1e-2 * sp.abs().max(sm.abs()).max(1.0)
}

/// Central-difference check of `f` with respect to each of `inputs`.
/// `max_coords` bounds how many coordinates are probed per input (randomly chosen).
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64, max_coords: Option<usize>, seed: u64) -> Result<GradCheckReport, AutogradError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, AutogradError>,
{
    let eval = |vals: &[Tensor]| -> Result<f64, AutogradError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let loss = project(&mut g, out, seed)?;
        Ok(g.item(loss))
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let loss = project(&mut g, out, seed)?;
    let f0 = g.item(loss);
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> =
        vars.iter().zip(inputs).map(|(v, t)| g.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()])).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::new();
    let mut probe = inputs.to_vec();
    for (ii, t) in inputs.iter().enumerate() {
        for c in coords(t.len(), max_coords, &mut rng) {
            let orig = t.data()[c];
            probe[ii].data_mut()[c] = orig + h;
            let fp = eval(&probe)?;
            probe[ii].data_mut()[c] = orig - h;
            let fm = eval(&probe)?;
            probe[ii].data_mut()[c] = orig;
            if is_kink(fp, f0, fm, h) {
                report.skipped.push((ii, c));
                continue;
            }
            let numeric = (fp - fm) / (2.0 * h);
            report.max_rel_err = report.max_rel_err.max(rel_err(analytic[ii][c], numeric));
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Same check, differentiating with respect to named entries of a parameter bundle.
pub fn grad_check_params<F>(
    f: F,
    params: &ParamBundle,
    names: &[&str],
    h: f64,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport, AutogradError>
where
    F: Fn(&mut Graph, &ParamBundle) -> Result<Var, AutogradError>,
{
    let eval = |p: &ParamBundle| -> Result<f64, AutogradError> {
        let mut g = Graph::new();
        let out = f(&mut g, p)?;
        let loss = project(&mut g, out, seed)?;
        Ok(g.item(loss))
    };
    let mut g = Graph::new();
    let out = f(&mut g, params)?;
    let loss = project(&mut g, out, seed)?;
    let f0 = g.item(loss);
    g.backward(loss)?;
    let grads = g.param_grads();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::new();
    let mut probe = params.clone();
    for (ii, name) in names.iter().enumerate() {
        let t = params.get(name).ok_or_else(|| AutogradError::MissingParam(name.to_string()))?;
        let zeros = vec![0.0; t.len()];
        let analytic = grads.get(name).unwrap_or(&zeros).to_vec();
        for c in coords(t.len(), max_coords, &mut rng) {
            let orig = t.data()[c];
            probe.get_mut(name).unwrap().data_mut()[c] = orig + h;
            let fp = eval(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[c] = orig - h;
            let fm = eval(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[c] = orig;
            if is_kink(fp, f0, fm, h) {
                report.skipped.push((ii, c));
                continue;
            }
            let numeric = (fp - fm) / (2.0 * h);
            report.max_rel_err = report.max_rel_err.max(rel_err(analytic[c], numeric));
            report.checked += 1;
        }
    }
    Ok(report)
}

fn coords(len: usize, max: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match max {
        Some(m) if m < len => {
            let mut v = sample(rng, len, m).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..len).collect(),
    }
}
