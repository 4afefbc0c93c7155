//! Built-in verification suites: schedule identities, Gaussian-oracle Monte
//! Carlo checks and finite-difference gradient checks.

use std::collections::BTreeMap;
use std::str::FromStr;

use nalgebra::DVector;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::networks::{DenoiserConfig, Forward, NetworkWeights};
use crate::oracle::{
    mc_forward_check, mc_posterior_check, mc_transition_check, verify_sampler, GaussianWorld,
};
use crate::rng::RngStream;
use crate::sampler::InferencePlan;
use crate::schedule::BridgeSchedule;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Schedule,
    Oracle,
    Gradcheck,
    All,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "schedule" => Ok(Suite::Schedule),
            "oracle" => Ok(Suite::Oracle),
            "gradcheck" => Ok(Suite::Gradcheck),
            "all" => Ok(Suite::All),
            other => Err(Error::InvalidArgument(format!("unknown suite `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, Serialize, Default)]
pub struct Report {
    pub checks: Vec<Check>,
    pub failures: usize,
    /// Supporting z-score matrices and similar detail, by check name.
    pub details: BTreeMap<String, serde_json::Value>,
}

impl Report {
    fn push(&mut self, name: impl Into<String>, value: f64, tolerance: f64, passed: bool) {
        if !passed {
            self.failures += 1;
        }
        self.checks.push(Check {
            name: name.into(),
            passed,
            value,
            tolerance,
        });
    }

    /// Passes when `value <= tolerance`.
    fn at_most(&mut self, name: impl Into<String>, value: f64, tolerance: f64) {
        self.push(name, value, tolerance, value <= tolerance);
    }

    fn merge(&mut self, other: Report) {
        self.failures += other.failures;
        self.checks.extend(other.checks);
        self.details.extend(other.details);
    }
}

pub fn run(suite: Suite, seed: u64) -> Result<Report> {
    match suite {
        Suite::Schedule => schedule_suite(),
        Suite::Oracle => oracle_suite(seed),
        Suite::Gradcheck => gradcheck_suite(seed),
        Suite::All => {
            let mut r = schedule_suite()?;
            r.merge(oracle_suite(seed)?);
            r.merge(gradcheck_suite(seed)?);
            Ok(r)
        }
    }
}

pub fn schedule_suite() -> Result<Report> {
    let mut r = Report::default();
    for steps in [2, 4, 10, 100, 1000] {
        for s in [0.5, 1.0, 2.0] {
            let sched = BridgeSchedule::new(steps, s)?;
            let tag = format!("T={steps},s={s}");
            let ends = sched.delta(0).abs().max(sched.delta(steps).abs());
            r.push(format!("endpoint variance {tag}"), ends, 0.0, ends == 0.0);
            let max = sched.delta_all().iter().copied().fold(f64::MIN, f64::max);
            r.at_most(format!("max variance {tag}"), (max - s / 2.0).abs(), 1e-12);
            let worst = (2..=steps)
                .map(|t| sched.coefficients(t).map(|c| (c.c_x + c.c_y - 1.0).abs()))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .fold(0.0, f64::max);
            r.at_most(format!("c_x + c_y = 1 {tag}"), worst, 1e-10);
        }
    }
    let sched = BridgeSchedule::new(4, 1.0)?;
    r.push(
        "delta(T=4, t=2) = 1/2",
        sched.delta(2),
        0.0,
        sched.delta(2) == 0.5,
    );
    let c = sched.coefficients(2)?;
    let exact = [
        ("c_x", c.c_x, 1.0),
        ("c_y", c.c_y, 0.0),
        ("c_eps", c.c_eps, 0.5),
        ("delta_hat", c.delta_hat, 1.0 / 3.0),
        ("delta_tilde", c.delta_tilde, 0.25),
    ];
    for (name, got, want) in exact {
        r.push(format!("{name}(T=4, t=2)"), got, 0.0, got == want);
    }
    Ok(r)
}

pub fn oracle_suite(seed: u64) -> Result<Report> {
    let mut r = Report::default();
    let root = RngStream::named(seed, "verify");
    let world = GaussianWorld::bivariate(0.8)?;
    let sched = BridgeSchedule::new(50, 1.0)?;
    let plan = InferencePlan::new(50, 50)?;
    let y = DVector::from_column_slice(&[0.7]);
    let rep = verify_sampler(
        &world,
        &sched,
        &plan,
        10_000,
        &y,
        &mut root.child("sampler"),
    )?;
    r.at_most("sampler mean |z| (full plan)", rep.max_abs_mean_z(), 4.0);
    r.details
        .insert("sampler".into(), serde_json::to_value(&rep)?);

    let mut rng = root.child("transition");
    let mut worst = 0.0f64;
    let mut zs = Vec::new();
    for t in [1, 10, 25, 40, 50] {
        let rep = mc_transition_check(&sched, &[0.3, -1.0], &[1.2, 0.5], t, 100_000, &mut rng)?;
        worst = worst.max(rep.max_abs_z());
        zs.push(rep);
    }
    r.at_most("transition composition |z|", worst, 4.0);
    r.details
        .insert("transition".into(), serde_json::to_value(&zs)?);

    let mut rng = root.child("forward");
    let mut worst = 0.0f64;
    for t in [5, 25, 45] {
        let rep = mc_forward_check(&sched, &[0.3, -1.0], &[1.2, 0.5], t, 100_000, &mut rng)?;
        worst = worst.max(rep.var_z.iter().fold(0.0f64, |m, z| m.max(z.abs())));
    }
    r.at_most("forward variance |z|", worst, 4.0);

    let rep = mc_posterior_check(&world, &sched, 20, 100_000, &mut root.child("posterior"))?;
    r.at_most("posterior regression |z|", rep.max_abs_z(), 4.0);
    r.details
        .insert("posterior".into(), serde_json::to_value(&rep)?);
    Ok(r)
}

/// Largest entry-wise relative error between analytic and central-difference
/// gradients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradcheckResult {
    pub max_rel: f64,
    pub max_abs: f64,
    pub entries: usize,
}

impl GradcheckResult {
    fn absorb(&mut self, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(1e-6);
        self.max_abs = self.max_abs.max(abs);
        self.max_rel = self.max_rel.max(rel);
        self.entries += 1;
    }
}

fn projection(graph: &mut Graph, out: Var, rng: &mut RngStream) -> Result<Var> {
    let w = Tensor::randn(graph.shape(out), rng);
    let w = graph.constant(w);
    let prod = graph.mul(out, w)?;
    Ok(graph.sum(prod))
}

/// Five-point central difference of `f` at offset 0; truncation error is
/// `O(h⁴)`, so `h` can be large enough to keep round-off negligible.
fn central_difference(h: f64, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let (p1, m1) = (f(h)?, f(-h)?);
    let (p2, m2) = (f(2.0 * h)?, f(-2.0 * h)?);
    Ok((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h))
}

/// Checks `build` against central differences with step `h`. The output is
/// reduced to a scalar through a fixed random projection so that every
/// output entry contributes.
pub fn gradcheck(
    build: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>,
    inputs: &[Tensor],
    h: f64,
    seed: u64,
) -> Result<GradcheckResult> {
    let eval = |vals: &[Tensor], grads: bool| -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        let loss = projection(&mut g, out, &mut RngStream::new(seed))?;
        let value = g.value(loss).item()?;
        if !grads {
            return Ok((value, Vec::new()));
        }
        let gr = g.backward(loss)?;
        let gs = vars
            .iter()
            .zip(vals)
            .map(|(&v, t)| {
                gr.get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape()))
            })
            .collect();
        Ok((value, gs))
    };
    let (_, analytic) = eval(inputs, true)?;
    let mut res = GradcheckResult {
        max_rel: 0.0,
        max_abs: 0.0,
        entries: 0,
    };
    let mut vals = inputs.to_vec();
    for k in 0..vals.len() {
        for i in 0..vals[k].numel() {
            let orig = vals[k].data()[i];
            let numeric = central_difference(h, |d| {
                vals[k].data_mut()[i] = orig + d;
                Ok(eval(&vals, false)?.0)
            })?;
            vals[k].data_mut()[i] = orig;
            res.absorb(analytic[k].data()[i], numeric);
        }
    }
    Ok(res)
}

type Primitive = (
    &'static str,
    Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>,
    Vec<Vec<usize>>,
);

/// Every graph operation, each with input shapes for a gradient check.
pub fn primitives() -> Vec<Primitive> {
    fn p(
        name: &'static str,
        f: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static,
        shapes: &[&[usize]],
    ) -> Primitive {
        (
            name,
            Box::new(f),
            shapes.iter().map(|s| s.to_vec()).collect(),
        )
    }
    vec![
        p("add", |g, v| g.add(v[0], v[1]), &[&[2, 3], &[2, 3]]),
        p("add broadcast", |g, v| g.add(v[0], v[1]), &[&[2, 3], &[3]]),
        p("add scalar", |g, v| g.add(v[0], v[1]), &[&[2, 3], &[1]]),
        p("sub", |g, v| g.sub(v[0], v[1]), &[&[4], &[4]]),
        p(
            "sub broadcast",
            |g, v| g.sub(v[0], v[1]),
            &[&[2, 2, 3], &[2, 3]],
        ),
        p("mul", |g, v| g.mul(v[0], v[1]), &[&[3, 2], &[3, 2]]),
        p("mul broadcast", |g, v| g.mul(v[0], v[1]), &[&[3, 2], &[2]]),
        p("mul self", |g, v| g.mul(v[0], v[0]), &[&[5]]),
        p("scale", |g, v| Ok(g.scale(v[0], -1.7)), &[&[2, 2]]),
        p("matmul", |g, v| g.matmul(v[0], v[1]), &[&[3, 4], &[4, 2]]),
        p(
            "matmul shared",
            |g, v| g.matmul(v[0], v[1]),
            &[&[2, 3, 4], &[4, 5]],
        ),
        p(
            "matmul batched",
            |g, v| g.matmul(v[0], v[1]),
            &[&[2, 3, 4], &[2, 4, 2]],
        ),
        p(
            "concat axis 0",
            |g, v| g.concat(&[v[0], v[1]], 0),
            &[&[2, 3], &[1, 3]],
        ),
        p(
            "concat axis 1",
            |g, v| g.concat(&[v[0], v[1]], 1),
            &[&[2, 2, 2], &[2, 3, 2]],
        ),
        p("chunk", |g, v| Ok(g.chunk(v[0], 2, 1)?[1]), &[&[2, 4, 3]]),
        p("softmax last", |g, v| g.softmax(v[0], 1), &[&[3, 4]]),
        p("softmax inner", |g, v| g.softmax(v[0], 1), &[&[2, 3, 2]]),
        p("silu", |g, v| Ok(g.silu(v[0])), &[&[7]]),
        p(
            "layernorm",
            |g, v| g.layernorm(v[0], v[1], v[2], 1, 1e-5),
            &[&[3, 4], &[4], &[4]],
        ),
        p(
            "layernorm inner",
            |g, v| g.layernorm(v[0], v[1], v[2], 1, 1e-5),
            &[&[2, 3, 2], &[3], &[3]],
        ),
        p("mean axis 0", |g, v| g.mean(v[0], 0), &[&[4, 3]]),
        p("mean axis 1", |g, v| g.mean(v[0], 1), &[&[2, 3, 2]]),
        p("sum", |g, v| Ok(g.sum(v[0])), &[&[3, 2]]),
        p("reshape", |g, v| g.reshape(v[0], &[3, 2]), &[&[2, 3]]),
        p("permute", |g, v| g.permute(v[0], &[2, 0, 1]), &[&[2, 3, 4]]),
        p("transpose", |g, v| g.transpose(v[0]), &[&[2, 3, 4]]),
    ]
}

/// A small configuration for the full-network gradient check.
pub fn gradcheck_config() -> DenoiserConfig {
    DenoiserConfig {
        height: 4,
        width: 4,
        channels: 2,
        hidden: 4,
        blocks: 2,
        heads: 2,
        token_dim: 3,
        time_dim: 4,
        enc_dim: 4,
        patch: 2,
        stem_kernel: 3,
    }
}

/// Weights with every group perturbed away from its initialisation, so that
/// zero-initialised projections still carry gradient signal.
pub fn random_weights(cfg: &DenoiserConfig, seed: u64) -> Result<NetworkWeights> {
    let mut rng = RngStream::named(seed, "gradcheck-init");
    let mut w = NetworkWeights::init(cfg, &mut rng)?;
    for (_, t) in w.iter_mut() {
        for v in t.data_mut() {
            *v += 0.3 * rng.normal();
        }
    }
    Ok(w)
}

/// Central-difference check of the full exemplar-conditioned denoiser with
/// respect to every named parameter.
pub fn denoiser_gradcheck(cfg: &DenoiserConfig, seed: u64, h: f64) -> Result<GradcheckResult> {
    let weights = random_weights(cfg, seed)?;
    let mut rng = RngStream::named(seed, "gradcheck-data");
    let x = Tensor::randn(&cfg.input_shape(), &mut rng);
    let ex = Tensor::randn(&cfg.input_shape(), &mut rng);
    let t = 7;
    let forward = |w: &NetworkWeights, grads: bool| -> Result<(f64, BTreeMap<String, Tensor>)> {
        let mut f = if grads {
            Forward::new(w, cfg, |_| true)
        } else {
            Forward::inference(w, cfg)
        };
        let xv = f.graph.constant(x.clone());
        let ev = f.graph.constant(ex.clone());
        let tok = f.global_encode(ev)?;
        let feats = f.exemplar_net(ev, 0, tok)?;
        let out = f.denoise(xv, t, tok, Some(&feats))?;
        let loss = projection(
            &mut f.graph,
            out,
            &mut RngStream::named(seed, "gradcheck-proj"),
        )?;
        let value = f.graph.value(loss).item()?;
        if !grads {
            return Ok((value, BTreeMap::new()));
        }
        let g = f.graph.backward(loss)?;
        Ok((value, f.param_grads(&g)))
    };
    let (_, analytic) = forward(&weights, true)?;
    let mut res = GradcheckResult {
        max_rel: 0.0,
        max_abs: 0.0,
        entries: 0,
    };
    let mut w = weights.clone();
    let names: Vec<String> = weights.names().cloned().collect();
    for name in names {
        let n = weights.get(&name)?.numel();
        for i in 0..n {
            let orig = weights.get(&name)?.data()[i];
            let numeric = central_difference(h, |d| {
                w.get_mut(&name)?.data_mut()[i] = orig + d;
                Ok(forward(&w, false)?.0)
            })?;
            w.get_mut(&name)?.data_mut()[i] = orig;
            let a = analytic.get(&name).map_or(0.0, |g| g.data()[i]);
            res.absorb(a, numeric);
        }
    }
    Ok(res)
}

pub const GRADCHECK_STEP: f64 = 1e-4;
pub const GRADCHECK_TOL: f64 = 1e-4;

pub fn gradcheck_suite(seed: u64) -> Result<Report> {
    let mut r = Report::default();
    let mut rng = RngStream::named(seed, "gradcheck-inputs");
    for (name, f, shapes) in primitives() {
        let inputs: Vec<Tensor> = shapes.iter().map(|s| Tensor::randn(s, &mut rng)).collect();
        let res = gradcheck(f.as_ref(), &inputs, GRADCHECK_STEP, seed)?;
        r.at_most(format!("gradcheck {name}"), res.max_rel, GRADCHECK_TOL);
    }
    let res = denoiser_gradcheck(&gradcheck_config(), seed, GRADCHECK_STEP)?;
    r.at_most("gradcheck full denoiser", res.max_rel, GRADCHECK_TOL);
    r.details
        .insert("denoiser".into(), serde_json::to_value(res)?);
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_parse() {
        assert_eq!("all".parse::<Suite>().unwrap(), Suite::All);
        assert!("everything".parse::<Suite>().is_err());
    }

    #[test]
    fn schedule_suite_ships_green() {
        let r = schedule_suite().unwrap();
        assert_eq!(
            r.failures,
            0,
            "{:?}",
            r.checks.iter().filter(|c| !c.passed).collect::<Vec<_>>()
        );
    }

    #[test]
    fn gradcheck_catches_a_detached_value() {
        // Copying the value into a constant hides the dependence from the
        // tape, while finite differences still see it.
        let detached = |g: &mut Graph, v: &[Var]| -> Result<Var> {
            let c = g.constant(g.value(v[0]).clone());
            Ok(g.scale(c, 2.0))
        };
        let honest = |g: &mut Graph, v: &[Var]| -> Result<Var> { Ok(g.scale(v[0], 2.0)) };
        let x = Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap();
        assert!(
            gradcheck(&detached, std::slice::from_ref(&x), 1e-5, 0)
                .unwrap()
                .max_rel
                > 0.5
        );
        assert!(gradcheck(&honest, &[x], 1e-5, 0).unwrap().max_rel < 1e-8);
    }
}
