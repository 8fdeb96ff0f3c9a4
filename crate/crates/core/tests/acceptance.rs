//! Acceptance harness: one PASS/FAIL line per primary criterion.
//!
//! Exits 0 after printing every line so the remaining test binaries still
//! run under `cargo test --workspace`. Set `ACCEPTANCE_STRICT=1` to exit 1
//! when any criterion fails.

mod common;

use std::time::Instant;

use causalmix::bed::{eig_nmc, eig_rao_blackwell, QueryStrategy, SimulatorSpec};
use causalmix::elicitation::*;
use causalmix::events::NullSink;
use causalmix::experiment::*;
use causalmix::graph::*;
use causalmix::likelihood::*;
use causalmix::mixture::*;
use causalmix::svgd::*;
use common::exact::{exact_map_graph, grid_edge_marginals_d2, two_node_chain_rows};
use common::*;
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

type Outcome = std::result::Result<String, String>;

struct Harness {
    failures: usize,
}

impl Harness {
    fn check(&mut self, name: &str, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f))
            .unwrap_or_else(|e| Err(format!("panicked: {}", panic_message(&e))));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name}  ({secs:.1}s)  {detail}"),
            Err(detail) => {
                self.failures += 1;
                println!("FAIL  {name}  ({secs:.1}s)  {detail}");
            }
        }
    }
}

fn panic_message(e: &Box<dyn std::any::Any + Send>) -> String {
    e.downcast_ref::<String>()
        .cloned()
        .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_default()
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn grad_error(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64]) -> f64 {
    relative_error(analytic, &numeric_grad(f, x, 1e-5), 1e-6)
}

// ---------------------------------------------------------------- unit suites

fn round_trip() -> std::result::Result<(), String> {
    for a in [2.0, 10.0, 50.0] {
        let h = ExpertPriorHyper { alpha0: a, beta0: a };
        for psi in (1..=19).map(|i| i as f64 * 0.05) {
            if (psi - h.mode()).abs() < 1e-12 {
                continue;
            }
            let o = map_response_to_observations(psi, &h).map_err(|e| e.to_string())?;
            let (n, k) = (o.n as f64, o.k as f64);
            let mode = (a + k - 1.0) / (2.0 * a + n - 2.0);
            let slack = 1.0 / (2.0 * a + n - 2.0);
            ensure((mode - psi).abs() <= slack + 1e-12, || format!("round trip a={a} psi={psi}: mode {mode}"))?;
        }
    }
    Ok(())
}

fn acyclicity_exact() -> std::result::Result<(), String> {
    for d in 2..=4 {
        for g in all_digraphs(d) {
            let h = acyclicity(&adjacency_as_f64(&g));
            ensure((h < ACYCLIC_TOL) == !has_cycle(&g), || format!("h = {h} on {g:?}"))?;
        }
    }
    Ok(())
}

fn gradients() -> std::result::Result<String, String> {
    let mut worst = (0.0f64, 0.0f64);
    let mut note = |err: f64, tol: f64, what: &str| -> std::result::Result<(), String> {
        if tol > 1e-4 {
            worst.1 = worst.1.max(err);
        } else {
            worst.0 = worst.0.max(err);
        }
        ensure(err < tol, || format!("{what}: relative error {err:.2e}"))
    };
    for seed in 0..20u64 {
        let mut r = rng(seed);
        let d = 4;
        let a = Array2::from_shape_fn((d, d), |(i, j)| if i == j { 0.0 } else { r.gen_range(0.0..1.0) });
        let (_, g) = acyclicity_with_grad(&a);
        let f = |v: &[f64]| acyclicity(&Array2::from_shape_vec((d, d), v.to_vec()).unwrap());
        let (x, g): (Vec<f64>, Vec<f64>) = (a.iter().copied().collect(), g.iter().copied().collect());
        note(grad_error(f, &x, &g), 1e-4, "acyclicity")?;

        let mut mask = HardConstraintMask::new(3);
        mask.set(1, 0, EdgeConstraint::Forbidden).unwrap();
        let evidence = vec![SoftEvidence { edge: (0, 1), psi_star: 0.9, obs: ImaginedObs { n: 72, k: 72 } }];
        let prior = if seed % 2 == 0 { StructurePrior::ErdosRenyi { edge_prob: 0.4 } } else { StructurePrior::ScaleFree };
        let terms = LatentPriorTerms { mask: &mask, structure_prior: prior, sigma_z: 1.0, beta: 3.0, omega: 0.6 };
        let z = LatentEmbedding::sample_prior(3, 3, 1.0, &mut r).unwrap();
        let (_, g) = latent_log_prior(&z, &terms, &evidence).unwrap();
        let f = |v: &[f64]| latent_log_prior(&LatentEmbedding::from_vec(3, 3, v.to_vec()).unwrap(), &terms, &evidence).unwrap().0;
        note(grad_error(f, z.as_slice(), &g), 1e-4, "latent prior")?;

        for (kind, tol) in [(ModelKind::Linear, 1e-4), (ModelKind::Mlp { hidden: 5 }, 1e-3)] {
            let rows = Array2::from_shape_fn((5, 3), |_| r.sample::<f64, _>(StandardNormal));
            let w: Vec<f64> = (0..5).map(|_| r.gen_range(0.0..1.0)).collect();
            let g = causalmix::synthetic::sample_er_dag(3, 1.0, &mut r).unwrap();
            let theta = BnParams::sample_prior(kind, 3, 0.1, &mut r).unwrap();
            let grad = grad_theta_log_joint(rows.view(), Some(&w), &g, &theta).unwrap();
            let f = |v: &[f64]| {
                let t = BnParams::from_vec(kind, 3, 0.1, v.to_vec()).unwrap();
                log_param_prior(&t).0 + weighted_log_likelihood(rows.view(), Some(&w), &g, &t).unwrap()
            };
            note(grad_error(f, theta.as_slice(), &grad), tol, &format!("{kind:?} joint"))?;
        }

        let spec = KernelSpec { gamma_z: 5.0, gamma_theta: 500.0 };
        let vp = |r: &mut rand_chacha::ChaCha8Rng| VecParticle {
            latent: (0..4).map(|_| 2.0 * r.sample::<f64, _>(StandardNormal)).collect(),
            params: (0..6).map(|_| 2.0 * r.sample::<f64, _>(StandardNormal)).collect(),
        };
        let (a, b) = (vp(&mut r), vp(&mut r));
        let kg = additive_se_kernel_grad(&a, &b, &spec);
        let flat: Vec<f64> = a.latent.iter().chain(&a.params).copied().collect();
        let analytic: Vec<f64> = kg.latent.iter().chain(&kg.params).copied().collect();
        let f = |v: &[f64]| additive_se_kernel(&VecParticle { latent: v[..4].to_vec(), params: v[4..].to_vec() }, &b, &spec);
        note(grad_error(f, &flat, &analytic), 1e-4, "kernel")?;
    }
    Ok(format!("max rel err {:.1e} (1e-4 tol), MLP {:.1e} (1e-3 tol)", worst.0, worst.1))
}

fn responsibilities_and_conservation() -> std::result::Result<(), String> {
    for seed in 0..500u64 {
        let mut r = rng(seed);
        let k = r.gen_range(1..6);
        let n = r.gen_range(1..40);
        let expected: Vec<Vec<f64>> =
            (0..k).map(|_| (0..n).map(|_| 200.0 * r.sample::<f64, _>(StandardNormal)).collect()).collect();
        let prior: Vec<f64> = (0..k).map(|_| r.gen_range(0.1..50.0)).collect();
        let resp = responsibilities_from_expected(&expected, &prior).map_err(|e| e.to_string())?;
        for row in resp.rows() {
            ensure((row.sum() - 1.0).abs() < 1e-9, || format!("row sum {}", row.sum()))?;
        }
        let post = update_mixing_weights(&resp, &prior);
        let gain = post.iter().sum::<f64>() - prior.iter().sum::<f64>();
        ensure((gain - n as f64).abs() < 1e-9, || format!("Dirichlet gain {gain} vs N = {n}"))?;
    }
    Ok(())
}

fn single_particle_svgd() -> std::result::Result<(), String> {
    let mut r = rng(2);
    let z = LatentEmbedding::sample_prior(3, 3, 1.0, &mut r).unwrap();
    let theta = BnParams::sample_prior(ModelKind::Linear, 3, 0.1, &mut r).unwrap();
    let p = Particle { z, theta };
    let target = |p: &Particle| ParticleGrad {
        latent: p.z.as_slice().iter().map(|x| -(x - 1.0)).collect(),
        params: p.theta.as_slice().iter().map(|x| -2.0 * x).collect(),
    };
    let spec = KernelSpec { gamma_z: 5.0, gamma_theta: 500.0 };
    let mut set = ParticleSet::new(vec![p.clone()]).unwrap();
    let mut manual = p;
    let mut vz = vec![0.0; manual.z.as_slice().len()];
    let mut vt = vec![0.0; manual.theta.len()];
    for _ in 0..200 {
        svgd_step(&mut set, &spec, 0.01, |_, p, _| Ok(target(p))).unwrap();
        let g = target(&manual);
        let phi_z: Vec<f64> = g.latent.iter().map(|v| 2.0 * v).collect();
        let phi_t: Vec<f64> = g.params.iter().map(|v| 2.0 * v).collect();
        rmsprop_ascent(manual.z.as_mut_slice(), &mut vz, &phi_z, 0.01);
        rmsprop_ascent(manual.theta.as_mut_slice(), &mut vt, &phi_t, 0.01);
    }
    ensure(set.particles[0] == manual, || "P=1 SVGD diverged from adapted gradient ascent".into())
}

fn unit_suites() -> Outcome {
    round_trip()?;
    acyclicity_exact()?;
    let grads = gradients()?;
    responsibilities_and_conservation()?;
    single_particle_svgd()?;
    Ok(format!("round trip, acyclicity d<=4, gradients ({grads}), rows/conservation, P=1 SVGD"))
}

// ---------------------------------------------------------------------- EIG

fn eig_checks() -> Outcome {
    let rb = eig_rao_blackwell(&[0.0, 1.0]).map_err(|e| e.to_string())?;
    ensure(rb == std::f64::consts::LN_2, || format!("RB {rb} != ln 2"))?;
    let binary = SimulatorSpec { alpha_s: 10.0, beta_s: 10.0, binary_mode: true };
    let mut r = rng(2024);
    let mut worst = 0.0f64;
    for case in 0..20 {
        let p = r.gen_range(2..8);
        let probs: Vec<f64> = (0..p).map(|_| r.gen_range(0.0..1.0)).collect();
        let exact = eig_rao_blackwell(&probs).unwrap();
        let est = eig_nmc(&probs, &binary, 4000, &mut rng(case)).unwrap();
        let z = (est.mean - exact).abs() / est.std_err.max(1e-300);
        worst = worst.max(z);
        ensure(z <= 3.0, || format!("case {case}: NMC {} ± {} vs RB {exact}", est.mean, est.std_err))?;
    }
    for g in [0.0, 0.3, 0.5, 1.0] {
        ensure(eig_rao_blackwell(&[g; 5]).unwrap() == 0.0, || format!("RB identical particles at {g}"))?;
        for spec in [SimulatorSpec::default(), binary] {
            let est = eig_nmc(&[g; 5], &spec, 300, &mut rng(1)).unwrap();
            ensure(est.mean == 0.0, || format!("NMC identical particles at {g}: {}", est.mean))?;
        }
    }
    Ok(format!("RB = ln 2 exactly; worst |NMC - RB| = {worst:.2} SE; identical particles give 0"))
}

// ---------------------------------------------------------- exact posterior

fn exact_posterior() -> Outcome {
    let mut cfg = desk_config(1, 60, 2000);
    // Edge probability 0.5 on the single node pair.
    cfg.structure_prior = PriorConfig::ErdosRenyi { edges_per_node: 0.25 };
    let mut diffs = Vec::new();
    for seed in 0..5u64 {
        let rows = two_node_chain_rows(seed, 20);
        let exact = grid_edge_marginals_d2(&rows, 0.1, 0.5);
        let data = Dataset::new(rows).map_err(|e| e.to_string())?;
        let state = run_cavi(&data, &cfg, seed, &mut NullSink).map_err(|e| e.to_string())?;
        let approx = edge_marginals(&state.components[0].hard_graphs());
        let diff = (&approx - &exact).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        diffs.push(diff);
    }
    let text = format!("max |particle - exact| per data seed: {}", fmt_vec(&diffs, 3));
    if diffs.iter().all(|&d| d <= 0.15) {
        Ok(text)
    } else {
        Err(text)
    }
}

// ------------------------------------------------------------------ suites

fn base_config(suite: Suite, d: usize, n: usize, held_out: usize, particles: usize, steps: usize) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.suite = suite;
    c.synthetic = Some(SyntheticSpec { num_vars: d, num_rows: n, held_out_rows: held_out, edges_per_node: 1.0, ..Default::default() });
    c.inference = desk_config(1, particles, steps);
    c.elicitation.queries_per_component = 5;
    c
}

fn recovery_k1() -> Outcome {
    let mut c = base_config(Suite::SingleComponentQuerying, 5, 200, 0, 20, 2000);
    c.seeds = (0..5).collect();
    let res = run_experiment(&c).map_err(|e| e.to_string())?;
    let mut hits = 0;
    let mut exact_hits = 0;
    let mut agree = 0;
    let mut shds = Vec::new();
    for run in &res.runs {
        let rep = &run.report;
        let shd = *rep.map_shd.first().ok_or_else(|| format!("seed {}: {:?}", rep.seed, rep.failure))?;
        shds.push(shd);
        hits += usize::from(shd == 0);
        let seed_data = prepare_data(&c, rep.seed).map_err(|e| e.to_string())?;
        let truth = &seed_data.truth.as_ref().unwrap().components[0].graph;
        let exact = exact_map_graph(&seed_data.data.rows, 0.1, 0.5);
        exact_hits += usize::from(&exact == truth);
        let session = run.session.as_ref().unwrap();
        let comp = &session.state.components[0];
        let prior = c.inference.structure_prior.resolve(5);
        let m = map_particle(comp, &seed_data.data, None, &prior, c.inference.param_prior).map_err(|e| e.to_string())?;
        agree += usize::from(hard_graph(&comp.particles.particles[m].z, comp.mask()) == exact);
    }
    let text = format!(
        "MAP = truth in {hits}/5 (MAP SHD {shds:?}); exact-posterior MAP = truth in {exact_hits}/5; particle MAP = exact MAP in {agree}/5"
    );
    if hits >= 4 {
        Ok(text)
    } else {
        Err(text)
    }
}

fn recovery_k2() -> Outcome {
    let mut c = base_config(Suite::TwoComponentMixture, 5, 200, 200, 20, 2000);
    c.inference.num_components = 2;
    c.synthetic.as_mut().unwrap().min_separation = Some(0.95);
    c.seeds = (0..5).collect();
    let res = run_experiment(&c).map_err(|e| e.to_string())?;
    let accs: Vec<f64> = res.runs.iter().map(|r| r.report.accuracy.unwrap_or(0.0)).collect();
    let hits = accs.iter().filter(|&&a| a >= 0.9).count();
    let text = format!("held-out accuracy >= 0.9 in {hits}/5: {}", fmt_vec(&accs, 3));
    if hits >= 4 {
        Ok(text)
    } else {
        Err(text)
    }
}

fn expert_config(rounds: usize, strategy: QueryStrategy, reliability: f64) -> ExperimentConfig {
    let mut c = base_config(Suite::SingleComponentQuerying, 6, 100, 0, 20, 1000);
    c.elicitation.rounds = rounds;
    c.elicitation.bed.strategy = strategy;
    c.oracle.reliability = reliability;
    c.seeds = (0..10).collect();
    c
}

/// Mean ESHD of every seed after each query round.
fn trajectories(res: &SuiteResult) -> std::result::Result<Vec<Vec<f64>>, String> {
    res.runs
        .iter()
        .map(|r| match &r.report.failure {
            Some(f) => Err(format!("seed {} failed: {f}", r.report.seed)),
            None => Ok(r.report.trajectory.iter().map(|p| p.mean_eshd).collect()),
        })
        .collect()
}

fn column(traj: &[Vec<f64>], i: usize) -> Vec<f64> {
    traj.iter().map(|t| t[i]).collect()
}

fn ci(values: &[f64], label: u64) -> MeanCi {
    bootstrap_mean_ci(values, 1000, &mut derived_rng(0, &[100, label])).unwrap()
}

fn fmt_vec(v: &[f64], digits: usize) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.digits$}")).collect();
    format!("[{}]", parts.join(", "))
}

fn fmt_ci(c: &MeanCi) -> String {
    format!("{:.2} [{:.2}, {:.2}]", c.mean, c.low, c.high)
}

/// Passes when `cis` is nonincreasing, tolerating `allowed` inversions whose
/// intervals overlap.
fn nonincreasing(cis: &[MeanCi], allowed: usize) -> bool {
    let mut inversions = 0;
    for w in cis.windows(2) {
        if w[1].mean > w[0].mean {
            if !w[1].overlaps(&w[0]) {
                return false;
            }
            inversions += 1;
        }
    }
    inversions <= allowed
}

struct ExpertSuites {
    bed15: Vec<Vec<f64>>,
    random10: Vec<f64>,
    r07: Vec<f64>,
    r05: Vec<f64>,
}

fn run_expert_suites() -> std::result::Result<ExpertSuites, String> {
    let bed = run_experiment(&expert_config(3, QueryStrategy::Bed, 0.9)).map_err(|e| e.to_string())?;
    let random = run_experiment(&expert_config(2, QueryStrategy::Random, 0.9)).map_err(|e| e.to_string())?;
    let r07 = run_experiment(&expert_config(3, QueryStrategy::Bed, 0.7)).map_err(|e| e.to_string())?;
    let r05 = run_experiment(&expert_config(3, QueryStrategy::Bed, 0.5)).map_err(|e| e.to_string())?;
    let last = |res: &SuiteResult| -> std::result::Result<Vec<f64>, String> {
        Ok(trajectories(res)?.iter().map(|t| *t.last().unwrap()).collect())
    };
    Ok(ExpertSuites { bed15: trajectories(&bed)?, random10: last(&random)?, r07: last(&r07)?, r05: last(&r05)? })
}

fn expert_effect(s: &ExpertSuites) -> Outcome {
    let cis: Vec<MeanCi> = (0..4).map(|i| ci(&column(&s.bed15, i), i as u64)).collect();
    let bed10 = column(&s.bed15, 2);
    let (bed_mean, random_mean) = (mean(&bed10), mean(&s.random10));
    let trend = nonincreasing(&cis, 1);
    let text = format!(
        "ESHD by budget 0/5/10/15: {}; budget 10 BED {bed_mean:.2} vs random {random_mean:.2}",
        cis.iter().map(fmt_ci).collect::<Vec<_>>().join(" / ")
    );
    if trend && bed_mean <= random_mean {
        Ok(text)
    } else {
        Err(text)
    }
}

fn reliability(s: &ExpertSuites) -> Outcome {
    let r09 = column(&s.bed15, 3);
    let cis = [ci(&r09, 10), ci(&s.r07, 11), ci(&s.r05, 12)];
    // Ordered from most to least reliable, ESHD must not decrease.
    let ok = cis.windows(2).all(|w| w[0].mean <= w[1].mean || w[0].overlaps(&w[1]));
    let text = format!("ESHD at r = 0.9 / 0.7 / 0.5: {}", cis.iter().map(fmt_ci).collect::<Vec<_>>().join(" / "));
    if ok {
        Ok(text)
    } else {
        Err(text)
    }
}

fn perfect_oracle() -> Outcome {
    let mut c = base_config(Suite::SingleComponentQuerying, 6, 100, 0, 4, 500);
    c.inference.cavi_rounds = 2;
    c.elicitation.rounds = 6;
    c.oracle.perfect = true;
    c.seeds = (0..3).collect();
    let res = run_experiment(&c).map_err(|e| e.to_string())?;
    let finals: Vec<f64> = trajectories(&res)?.iter().map(|t| *t.last().unwrap()).collect();
    let text = format!("d=6, budget 30, final ESHD per seed {}", fmt_vec(&finals, 3));
    if finals.iter().all(|&v| v == 0.0) {
        Ok(text)
    } else {
        Err(text)
    }
}

fn determinism(s: &ExpertSuites) -> Outcome {
    let bytes = |c: &ExperimentConfig| -> std::result::Result<Vec<Vec<u8>>, String> {
        let res = run_experiment(c).map_err(|e| e.to_string())?;
        Ok(res.runs.iter().map(|r| serde_json::to_vec(&r.report).unwrap()).collect())
    };
    let mut expert = expert_config(3, QueryStrategy::Bed, 0.9);
    expert.seeds = vec![0];
    let mut k2 = base_config(Suite::TwoComponentMixture, 5, 200, 200, 10, 500);
    k2.inference.num_components = 2;
    k2.seeds = vec![0];
    // The label and first five features of the bundled data set keep the rerun short.
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let full = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/breast_cancer.csv"))
        .map_err(|e| e.to_string())?;
    let subset: String = full
        .lines()
        .take(201)
        .map(|l| l.split(',').take(6).collect::<Vec<_>>().join(",") + "\n")
        .collect();
    let csv = dir.path().join("subset.csv");
    std::fs::write(&csv, subset).map_err(|e| e.to_string())?;
    let mut real = base_config(Suite::RealData, 5, 200, 0, 4, 500);
    real.synthetic = None;
    real.inference.num_components = 2;
    real.real_data = Some(RealDataSpec { path: csv, label_column: true, standardize: true, held_out_fraction: 0.2 });
    for (name, cfg) in [("expert", &expert), ("two-component", &k2), ("real-data", &real)] {
        let (a, b) = (bytes(cfg)?, bytes(cfg)?);
        ensure(a == b, || format!("{name} suite reports differ between runs"))?;
    }
    // A budget-5 run must reproduce the first snapshot of the budget-15 run.
    let mut five = expert_config(1, QueryStrategy::Bed, 0.9);
    five.seeds = vec![0];
    let res = run_experiment(&five).map_err(|e| e.to_string())?;
    for (i, t) in trajectories(&res)?.iter().enumerate() {
        ensure(t[..] == s.bed15[i][..2], || format!("seed {i}: budget-5 run {t:?} vs budget-15 prefix {:?}", &s.bed15[i][..2]))?;
    }
    Ok("expert, two-component and real-data suites byte-identical on rerun; budget-5 run equals budget-15 prefix".into())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn main() {
    let mut h = Harness { failures: 0 };
    h.check("unit/property suites", unit_suites);
    h.check("EIG correctness", eig_checks);
    h.check("exact-posterior agreement (d=2, N=20)", exact_posterior);
    h.check("recovery K=1 (d=5, N=200, MAP = truth >= 4/5)", recovery_k1);
    h.check("recovery K=2 (d=5, N=200, accuracy >= 0.9 in >= 4/5)", recovery_k2);
    let start = Instant::now();
    let suites = run_expert_suites();
    println!("      expert suites computed in {:.1}s", start.elapsed().as_secs_f64());
    let with_suites = |f: fn(&ExpertSuites) -> Outcome| {
        let s = &suites;
        move || s.as_ref().map_err(|e| e.clone()).and_then(f)
    };
    h.check("expert effect (d=6, r=0.9, 10 seeds)", with_suites(expert_effect));
    h.check("hard-constraint sanity (perfect oracle)", perfect_oracle);
    h.check("reliability monotonicity (r = 0.9, 0.7, 0.5)", with_suites(reliability));
    h.check("determinism", with_suites(determinism));
    println!("{} criteria failed", h.failures);
    if h.failures > 0 && std::env::var("ACCEPTANCE_STRICT").as_deref() == Ok("1") {
        std::process::exit(1);
    }
}
