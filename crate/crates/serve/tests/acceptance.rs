//! One PASS/FAIL line per primary acceptance criterion.
//!
//! `cargo test -p vaem-serve --test acceptance -- <filter>` runs the
//! criteria whose key contains `filter`. Failing criteria are reported but
//! only fail the process when `VAEM_ACCEPTANCE_STRICT=1`.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use http_body_util::BodyExt;
use rand::Rng as _;
use serde_json::{json, Value};
use tower::ServiceExt;

use vaem::autodiff::kernels::softmax_in_place;
use vaem::autodiff::{gradient_check, Activation, Init, Mlp, ParamSet, Tensor};
use vaem::checkpoint::{AnyModel, Checkpoint};
use vaem::config::RunConfig;
use vaem::data::{Dataset, SchemaDoc};
use vaem::dependency::Element;
use vaem::eval::{imputation_rmse, run_suite, tied_ranks, RunReport, SuiteConfig};
use vaem::gaussian::{self, kl_diag};
use vaem::likelihood::ordinal_masses;
use vaem::model::{ModelKind, TabularModel, VaemConfig, VaemModel};
use vaem::rng;
use vaem::saia::{auic, estimate_rewards, information_curve, random_ordering, sing_ordering, SaiaConfig};
use vaem::synthetic::{self, BinaryJoint};
use vaem_serve::service::{router, AppState, ModelEntry, ServiceConfig};

const BOSTON_NLL_MAX: f64 = -1.7;
const BOSTON_COND_MARGIN: f64 = 1.5;
const ENERGY_PARITY: f64 = 0.5;
const BOSTON_RMSE: (f64, f64) = (0.03, 0.10);
const ELBO_GAP: f64 = 0.1;
const IS_SAMPLES: usize = 10_000;
const SPEARMAN_MIN: f64 = 0.9;
const REWARD_BUDGET: Duration = Duration::from_secs(60);
const CURVE_DROP: f64 = 0.9;
const GRAD_TOL: f64 = 1e-4;
const NORM_TOL: f64 = 1e-10;
const PERM_TOL: f64 = 1e-9;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

fn load(name: &str) -> Dataset {
    let dir = data_dir();
    let doc = SchemaDoc::load(&dir.join(format!("{name}.schema.json"))).unwrap();
    Dataset::load_csv(&dir.join(format!("{name}.csv")), &doc).unwrap()
}

fn suite_config(stage1: usize, stage2: usize) -> SuiteConfig {
    SuiteConfig {
        run: RunConfig {
            stage1_epochs: stage1,
            stage2_epochs: stage2,
            importance_samples: 1000,
            ..RunConfig::default()
        },
        n_seeds: 5,
        train_fraction: 0.9,
        master_seed: 0,
    }
}

/// VAEM and VAE-balanced on Boston, 5 seeds, 1000/1000 epochs.
fn boston_suite() -> &'static [RunReport] {
    static R: OnceLock<Vec<RunReport>> = OnceLock::new();
    R.get_or_init(|| {
        run_suite("boston", &load("boston"), &[ModelKind::Vaem, ModelKind::VaeBalanced], &suite_config(1000, 1000))
            .unwrap()
    })
}

fn boston_generation() -> Outcome {
    let r = boston_suite();
    let (v, b) = (&r[0].generation_nll, &r[1].generation_nll);
    outcome(
        v.mean <= BOSTON_NLL_MAX && v.mean < b.mean,
        format!("VAEM {} (<= {BOSTON_NLL_MAX}), VAE-balanced {}", v.display(), b.display()),
    )
}

fn boston_conditional() -> Outcome {
    let r = boston_suite();
    let (v, b) = (&r[0].conditional_nll, &r[1].conditional_nll);
    outcome(
        v.mean <= BOSTON_NLL_MAX && b.mean - v.mean >= BOSTON_COND_MARGIN,
        format!(
            "VAEM {} (<= {BOSTON_NLL_MAX}), VAE-balanced {}, margin {:.3} (>= {BOSTON_COND_MARGIN})",
            v.display(),
            b.display(),
            b.mean - v.mean
        ),
    )
}

fn energy_parity() -> Outcome {
    let csv = std::env::var_os("VAEM_ENERGY_CSV")
        .map(PathBuf::from)
        .unwrap_or_else(|| data_dir().join("energy.csv"));
    if !csv.exists() {
        return outcome(false, format!("{} not available", csv.display()));
    }
    let doc = SchemaDoc::load(&data_dir().join("energy.schema.json")).unwrap();
    let data = match Dataset::load_csv(&csv, &doc) {
        Ok(d) => d,
        Err(e) => return outcome(false, format!("{}: {e}", csv.display())),
    };
    let r = run_suite("energy", &data, &[ModelKind::Vae, ModelKind::Vaem], &suite_config(1000, 1000)).unwrap();
    let gap = (r[0].generation_nll.mean - r[1].generation_nll.mean).abs();
    outcome(
        gap <= ENERGY_PARITY,
        format!(
            "VAE {}, VAEM {}, |gap| {gap:.3} (<= {ENERGY_PARITY})",
            r[0].generation_nll.display(),
            r[1].generation_nll.display()
        ),
    )
}

fn imputation_error() -> Outcome {
    let one = |spec: vaem::data::ColumnSpec, truth: f64| {
        Dataset::new(vaem::data::Schema::new(vec![spec.target()], false).unwrap(), 1, vec![truth], vec![true]).unwrap()
    };
    let cont = one(vaem::data::ColumnSpec::continuous("x", 0.0, 1.0), 1.0);
    let cat = one(vaem::data::ColumnSpec::categorical("k", &["a", "b"]), 0.0);
    let e1 = imputation_rmse(&cont, &[Some(0.5)], &[false]).unwrap();
    let e2 = imputation_rmse(&cat, &[Some(1.0)], &[false]).unwrap();
    let exact = e1 == 0.5 && e2 == 2f64.sqrt();
    let boston = &boston_suite()[0].imputation_rmse;
    let in_band = (BOSTON_RMSE.0..=BOSTON_RMSE.1).contains(&boston.mean);
    outcome(
        exact && in_band,
        format!(
            "fixtures {e1} (0.5), {e2} (sqrt 2); Boston VAEM {} in [{}, {}]",
            boston.display(),
            BOSTON_RMSE.0,
            BOSTON_RMSE.1
        ),
    )
}

fn marginal_tightness() -> Outcome {
    let data = synthetic::mixed(500, 11).unwrap();
    let mut cfg = VaemConfig::default();
    cfg.dependency.epochs = 1;
    let model = VaemModel::train_two_stage(&data, &cfg, 5).unwrap();
    let mut worst = 0.0f64;
    let mut rows = Vec::new();
    for (c, vae) in model.marginals.iter().enumerate() {
        let (elbo, ll) = vae
            .elbo_and_is_ll(&data.column_values(c), IS_SAMPLES, &mut rng::stream(5, &[0x91, c as u64]))
            .unwrap();
        worst = worst.max((ll - elbo).abs());
        rows.push(format!("{}: {elbo:.3}/{ll:.3}", data.schema.columns[c].name));
    }
    outcome(
        worst < ELBO_GAP,
        format!("max |LL - ELBO| {worst:.4} (< {ELBO_GAP}); {}", rows.join(", ")),
    )
}

fn monotonicity() -> Outcome {
    let mut compact = VaemConfig::compact();
    compact.marginal.epochs = 300;
    compact.dependency.epochs = 300;
    let mut boston = VaemConfig::default();
    boston.marginal.epochs = 200;
    boston.dependency.epochs = 200;
    let cases = [
        ("mixed", synthetic::mixed(300, 7).unwrap(), &compact),
        ("deterministic", synthetic::deterministic(600, 1).unwrap(), &compact),
        ("binary", BinaryJoint::default().sample(600, 2).unwrap(), &compact),
        ("boston", load("boston"), &boston),
    ];
    let mut pass = true;
    let mut rows = Vec::new();
    for (name, data, cfg) in cases {
        let m = VaemModel::train_two_stage(&data, cfg, 3).unwrap();
        let (z, t) = (m.meta.combined_elbo_zero_init, m.meta.combined_elbo_trained);
        pass &= t > z;
        rows.push(format!("{name} {z:.3} -> {t:.3}"));
    }
    outcome(pass, rows.join(", "))
}

fn bernoulli_kl(p: f64, q: f64) -> f64 {
    let term = |a: f64, b: f64| if a > 0.0 { a * (a / b).ln() } else { 0.0 };
    term(p, q) + term(1.0 - p, 1.0 - q)
}

/// Exact E_{x_i | x_O} KL[p(t | x_i, x_O) || p(t | x_O)] under the joint.
fn oracle_reward(j: &BinaryJoint, cand: usize, obs: Option<(usize, usize)>) -> f64 {
    let keep = |a: usize, b: usize| obs.is_none_or(|(c, v)| [a, b][c] == v);
    let mass = |f: &dyn Fn(usize, usize) -> bool| {
        let (mut all, mut pos) = (0.0, 0.0);
        for a in 0..2 {
            for b in 0..2 {
                if keep(a, b) && f(a, b) {
                    all += j.prob(a, b, 0) + j.prob(a, b, 1);
                    pos += j.prob(a, b, 1);
                }
            }
        }
        (all, pos)
    };
    let (z, pos) = mass(&|_, _| true);
    (0..2)
        .map(|v| {
            let (n, n1) = mass(&|a, b| [a, b][cand] == v);
            n / z * bernoulli_kl(n1 / n, pos / z)
        })
        .sum()
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (tied_ranks(a), tied_ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

fn reward_oracle() -> Outcome {
    let start = Instant::now();
    let joint = BinaryJoint::default();
    let contexts = [
        (0, None),
        (1, None),
        (1, Some((0, 0))),
        (1, Some((0, 1))),
        (0, Some((1, 0))),
        (0, Some((1, 1))),
    ];
    let truth: Vec<f64> = contexts.iter().map(|&(c, o)| oracle_reward(&joint, c, o)).collect();
    let saia = SaiaConfig {
        outer_samples: 50,
        inner_samples: 10,
        mc_samples: 10,
    };
    let mut cfg = VaemConfig::compact();
    cfg.marginal.epochs = 300;
    cfg.dependency.epochs = 300;
    let mut rhos = Vec::new();
    for seed in 0..10 {
        let data = joint.sample(1000, seed).unwrap();
        let mut m = VaemModel::train_two_stage(&data, &cfg, seed).unwrap();
        m.train_discriminator(&data, &cfg.discriminator, seed).unwrap();
        let est: Vec<f64> = contexts
            .iter()
            .map(|&(c, o)| {
                let (mut x, mut mask) = (vec![0.0; 3], vec![false; 3]);
                if let Some((oc, v)) = o {
                    x[oc] = v as f64;
                    mask[oc] = true;
                }
                estimate_rewards(&m, &x, &mask, &[c], &saia, seed).unwrap()[0].reward
            })
            .collect();
        rhos.push(spearman(&est, &truth));
    }
    let mean = rhos.iter().sum::<f64>() / rhos.len() as f64;
    let took = start.elapsed();
    outcome(
        mean >= SPEARMAN_MIN && took < REWARD_BUDGET,
        format!(
            "mean Spearman {mean:.3} (>= {SPEARMAN_MIN}), per seed {:?}, {:.1}s (< {}s)",
            rhos.iter().map(|r| (r * 100.0).round() / 100.0).collect::<Vec<_>>(),
            took.as_secs_f64(),
            REWARD_BUDGET.as_secs()
        ),
    )
}

fn saia_sanity() -> Outcome {
    let saia = SaiaConfig::default();
    let data = synthetic::deterministic(2000, 1).unwrap();
    let (train, test) = data.split(0.9, 2).unwrap();
    let mut cfg = VaemConfig::compact();
    cfg.dependency.epochs = 1000;
    let m = VaemModel::train_two_stage(&train, &cfg, 2).unwrap();
    let order = sing_ordering(&m, &test, &saia, 1).unwrap();
    let curve = information_curve(&m, &test, &order, 100, 1).unwrap();
    let drop = 1.0 - curve.rmse[1] / curve.rmse[0];
    let det_ok = order[0] == 0 && drop >= CURVE_DROP;

    let boston = load("boston");
    let (train, test) = boston.split(0.9, 1).unwrap();
    let m = VaemModel::train_two_stage(&train, &VaemConfig::default(), 7).unwrap();
    let (mut sing, mut random) = (0.0, 0.0);
    for seed in 0..10 {
        let order = sing_ordering(&m, &test, &saia, seed).unwrap();
        sing += auic(&information_curve(&m, &test, &order, 10, seed).unwrap()).unwrap() / 10.0;
        let order = random_ordering(&m, seed);
        random += auic(&information_curve(&m, &test, &order, 10, seed).unwrap()).unwrap() / 10.0;
    }
    outcome(
        det_ok && sing <= random,
        format!(
            "deterministic order {order:?}, step-1 drop {:.1}% (>= {}%); Boston AUIC SING {sing:.3} vs random {random:.3}",
            drop * 100.0,
            CURVE_DROP * 100.0
        ),
    )
}

async fn call(app: &axum::Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn session_contract(model: VaemModel) -> Vec<String> {
    let ck = Checkpoint::new(AnyModel::Vaem(model), RunConfig::default(), 0).unwrap();
    let state = AppState::new(vec![ModelEntry::from_checkpoint("m", ck)], ServiceConfig::default()).unwrap();
    let app = router(state);
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
    rt.block_on(async {
        let mut bad = Vec::new();
        let mut expect = |what: &str, got: StatusCode, want: StatusCode| {
            if got != want {
                bad.push(format!("{what}: {got} != {want}"));
            }
        };
        let (s, _) = call(&app, Method::GET, "/health", None).await;
        expect("health", s, StatusCode::OK);
        let (s, _) = call(&app, Method::POST, "/models/nope/sessions", None).await;
        expect("unknown model", s, StatusCode::NOT_FOUND);
        let (s, _) = call(&app, Method::POST, "/models/m/sessions", Some(json!({"observations": {"target": 0.5}}))).await;
        expect("target observed", s, StatusCode::UNPROCESSABLE_ENTITY);
        let (s, created) = call(&app, Method::POST, "/models/m/sessions", Some(json!({"seed": 3}))).await;
        expect("create", s, StatusCode::CREATED);
        let sid = created["id"].as_str().unwrap_or_default().to_string();
        let (s, rec) = call(&app, Method::GET, &format!("/sessions/{sid}/recommendation"), None).await;
        expect("recommend", s, StatusCode::OK);
        let top = rec["ranking"][0]["feature"].as_str().unwrap_or("driver").to_string();
        let observe = format!("/sessions/{sid}/observe");
        let (s, _) = call(&app, Method::POST, &observe, Some(json!({"feature": top, "value": "x"}))).await;
        expect("bad value", s, StatusCode::UNPROCESSABLE_ENTITY);
        let (s, _) = call(&app, Method::POST, &observe, Some(json!({"feature": top, "value": 0.4}))).await;
        expect("observe", s, StatusCode::OK);
        let (s, _) = call(&app, Method::POST, &observe, Some(json!({"feature": top, "value": 0.4}))).await;
        expect("observe twice", s, StatusCode::CONFLICT);
        let (s, curve) = call(&app, Method::GET, &format!("/sessions/{sid}/curve"), None).await;
        expect("curve", s, StatusCode::OK);
        if curve["steps"].as_array().map(Vec::len) != Some(2) {
            bad.push(format!("curve length: {curve}"));
        }
        bad
    })
}

fn property_suites() -> Outcome {
    let mut failures = Vec::new();
    let mut r = rng::seeded(21);

    let mut params = ParamSet::new();
    let x = params.add("x", Tensor::matrix(4, 3, gaussian::std_normals(&mut r, 12)).unwrap());
    let net = Mlp::new(&mut params, "net", &[3, 5, 2], Activation::Sigmoid, Init::Glorot, &mut r);
    let worst = gradient_check(
        &mut params,
        |tape, bound| {
            let y = net.forward(tape, bound, bound.get(x))?;
            let s = tape.log_softmax_rows(y)?;
            tape.mean(s)
        },
        1e-6,
    )
    .unwrap();
    if worst >= GRAD_TOL {
        failures.push(format!("gradient check {worst:e}"));
    }

    let mut worst_norm = 0.0f64;
    for _ in 0..500 {
        let n = r.random_range(2..10);
        let mut row: Vec<f64> = (0..n).map(|_| r.random_range(-40.0..40.0)).collect();
        let masses = ordinal_masses(&row, n);
        softmax_in_place(&mut row);
        worst_norm = worst_norm.max((row.iter().sum::<f64>() - 1.0).abs());
        worst_norm = worst_norm.max((masses.iter().sum::<f64>() - 1.0).abs());
    }
    if worst_norm >= NORM_TOL {
        failures.push(format!("normalization {worst_norm:e}"));
    }

    let kl = kl_diag(&[1.0], &[0.0], &[0.0], &[0.0]);
    if (kl - 0.5).abs() > 1e-12 {
        failures.push(format!("KL(N(1,1)||N(0,1)) = {kl}"));
    }

    let data = synthetic::mixed(200, 4).unwrap();
    let mut cfg = VaemConfig::compact();
    cfg.marginal.epochs = 30;
    cfg.dependency.epochs = 30;
    let model = VaemModel::train_two_stage(&data, &cfg, 4).unwrap();
    let elements: Vec<Element> = (0..data.schema.width())
        .flat_map(|c| [Element::X { feature: c, value: data.row(0)[c] }, Element::Z { feature: c, value: 0.1 * c as f64 }])
        .collect();
    let mut worst_perm = 0.0f64;
    for _ in 0..20 {
        let mut shuffled = elements.clone();
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut r);
        let q = model.partial_posterior(&[elements.clone(), shuffled]).unwrap();
        for k in 0..model.latent() {
            worst_perm = worst_perm.max((q.mean(0)[k] - q.mean(1)[k]).abs());
            worst_perm = worst_perm.max((q.logvar(0)[k] - q.logvar(1)[k]).abs());
        }
    }
    if worst_perm >= PERM_TOL {
        failures.push(format!("permutation invariance {worst_perm:e}"));
    }

    let ck = Checkpoint::new(AnyModel::Vaem(model), RunConfig::default(), 4).unwrap();
    let text = ck.to_json().unwrap();
    if Checkpoint::from_json(&text).unwrap().to_json().unwrap() != text {
        failures.push("checkpoint bytes differ after a round trip".into());
    }

    let mut det = VaemConfig::compact();
    det.marginal.epochs = 30;
    det.dependency.epochs = 30;
    let det_model = VaemModel::train_two_stage(&synthetic::deterministic(200, 1).unwrap(), &det, 1).unwrap();
    failures.extend(session_contract(det_model));

    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            format!("gradient {worst:.1e}, normalization {worst_norm:.1e}, permutation {worst_perm:.1e}, KL {kl}, checkpoint and session contract ok")
        } else {
            failures.join("; ")
        },
    )
}

type Criterion = (&'static str, fn() -> Outcome);

const CRITERIA: &[Criterion] = &[
    ("boston-generation-nll", boston_generation),
    ("boston-conditional-nll", boston_conditional),
    ("energy-parity", energy_parity),
    ("imputation-error", imputation_error),
    ("marginal-elbo-tightness", marginal_tightness),
    ("combined-elbo-monotone", monotonicity),
    ("reward-oracle", reward_oracle),
    ("saia-sanity", saia_sanity),
    ("property-suites", property_suites),
];

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let strict = std::env::var("VAEM_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut failed = 0;
    for (key, run) in CRITERIA {
        if !filters.is_empty() && !filters.iter().any(|f| key.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let o = run();
        failed += usize::from(!o.pass);
        println!(
            "{} {key} [{:.0}s]: {}",
            if o.pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            o.detail
        );
    }
    if strict && failed > 0 {
        std::process::exit(1);
    }
}
