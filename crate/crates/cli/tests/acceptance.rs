// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL line
//! each and exits non-zero if any failed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use headsteer::evaluation::{
    build_frontier, envelope_score, EnvelopeVariant, Frontier, Judge, JudgeRequest, LlmJudge, LlmJudgeConfig,
    ParetoPoint, ScoreKind, SyntheticJudge, TopLogprob, Transport, TransportError,
};
use headsteer::evaluation::ChatRequest;
use headsteer::extraction::{
    collect, default_sites, diff_in_means, ActivationBank, BankSample, ExtractionParams, SampleKey, VectorSet,
};
use headsteer::fixtures::{build_planted_model, PlantedModel, PlantedModelSpec};
use headsteer::localization::{head_contributions, select_heads, ContributionTable, HeadSelection};
use headsteer::persona::{Condition, PersonaSpec, PromptPair};
use headsteer::refmodel::{Model, ModelConfig, Steering};
use headsteer::sites::{Intervention, Scope, Site};
use headsteer::steering::{
    Configuration, Experiment, ExperimentPlan, RunParams, SiteSet, GLOBAL_COEFFICIENTS, HEAD_COEFFICIENTS,
};
use headsteer::tokenizer::Tokenizer;
use headsteer::util::norm;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn gaussian(rng: &mut impl Rng) -> f32 {
    rng.sample(StandardNormal)
}

fn rel_err(a: &[f32], b: &[f32]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (f64::from(*x) - f64::from(*y)).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| f64::from(*y).powi(2)).sum::<f64>().sqrt();
    num / den.max(1e-30)
}

fn random_tokens(rng: &mut ChaCha8Rng, n: usize, vocab: usize) -> Vec<u32> {
    (0..n).map(|_| rng.random_range(0..vocab as u32)).collect()
}

fn random_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    let n_heads = *[2usize, 4, 8].choose(rng).unwrap();
    let groups: Vec<usize> = [1usize, 2, 4].into_iter().filter(|g| n_heads % g == 0).collect();
    let group = *groups.choose(rng).unwrap();
    let d_head = *[4usize, 8].choose(rng).unwrap();
    ModelConfig {
        n_layers: rng.random_range(1..=4),
        d_model: *[16usize, 32].choose(rng).unwrap(),
        n_heads,
        n_kv_heads: n_heads / group,
        d_head,
        d_mlp: 32,
        max_seq: 64,
        ..ModelConfig::tiny()
    }
}

// 1. Attention output equals the sum of per-head projected outputs.
fn head_decomposition() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for draw in 0..20 {
        let cfg = random_config(&mut rng);
        let model = Model::random(cfg.clone(), rng.random()).map_err(|e| e.to_string())?;
        let toks = random_tokens(&mut rng, 12, cfg.vocab_size);
        let mut capture = Vec::new();
        for l in 0..cfg.n_layers {
            capture.push(Site::AttnOutput(l));
            capture.extend((0..cfg.n_heads).map(|h| Site::Head(l, h)));
        }
        let trace = model.forward(&toks, &capture, &Steering::none()).map_err(|e| e.to_string())?;
        for l in 0..cfg.n_layers {
            let mha = trace.get(&Site::AttnOutput(l)).unwrap();
            for (p, row) in mha.iter().enumerate() {
                let mut sum = vec![0.0f64; cfg.d_model];
                for h in 0..cfg.n_heads {
                    let o = &trace.get(&Site::Head(l, h)).unwrap()[p];
                    let w = model.head_o_proj(l, h).unwrap();
                    for (r, x) in o.iter().enumerate() {
                        for (j, s) in sum.iter_mut().enumerate() {
                            *s += f64::from(*x) * f64::from(w[r * cfg.d_model + j]);
                        }
                    }
                }
                let sum: Vec<f32> = sum.into_iter().map(|v| v as f32).collect();
                let e = rel_err(row, &sum);
                worst = worst.max(e);
                ensure!(e <= 1e-5, "draw {draw} layer {l} pos {p}: relative error {e:.2e}");
            }
        }
    }
    ensure!(start.elapsed() < Duration::from_secs(10), "took {:.2?}", start.elapsed());
    Ok(format!("20 configs, worst relative error {worst:.2e}"))
}

// 2. Steering a head equals steering the attention output with its projection.
fn head_site_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    for draw in 0..50 {
        let cfg = random_config(&mut rng);
        let model = Model::random(cfg.clone(), rng.random()).map_err(|e| e.to_string())?;
        let toks = random_tokens(&mut rng, 10, cfg.vocab_size);
        let layer = rng.random_range(0..cfg.n_layers);
        let head = rng.random_range(0..cfg.n_heads);
        let alpha: f32 = rng.random_range(-8.0..8.0);
        let v: Vec<f32> = (0..cfg.d_head).map(|_| gaussian(&mut rng)).collect();
        let projected: Vec<f32> = model.project_head(layer, head, &v).unwrap().iter().map(|x| alpha * x).collect();
        let a = [Intervention::add(Site::Head(layer, head), v, alpha, Scope::AllTokens)];
        let b = [Intervention::add(Site::AttnOutput(layer), projected, 1.0, Scope::AllTokens)];
        let la = model.forward(&toks, &[], &Steering::new(&model, &a, 0).unwrap()).map_err(|e| e.to_string())?;
        let lb = model.forward(&toks, &[], &Steering::new(&model, &b, 0).unwrap()).map_err(|e| e.to_string())?;
        for (x, y) in la.logits.iter().zip(&lb.logits) {
            let e = rel_err(x, y);
            worst = worst.max(e);
            ensure!(e <= 1e-5, "draw {draw} ({layer},{head}) alpha {alpha}: relative error {e:.2e}");
        }
    }
    Ok(format!("50 draws, worst relative error {worst:.2e}"))
}

fn random_bank(rng: &mut ChaCha8Rng) -> ActivationBank {
    let n_heads = *[1usize, 2, 4].choose(rng).unwrap();
    let d_head = rng.random_range(1..6);
    let d = rng.random_range(1..12);
    let scale = 10f32.powi(rng.random_range(-3..4));
    let sites = vec![Site::MlpOutput(0), Site::HeadConcat(1)];
    let n = rng.random_range(2..40);
    let samples = (0..n)
        .map(|i| {
            let condition = match i {
                0 => Condition::Target,
                1 => Condition::Neutral,
                _ if rng.random::<bool>() => Condition::Target,
                _ => Condition::Neutral,
            };
            let mut vectors = BTreeMap::new();
            vectors.insert(sites[0], (0..d).map(|_| scale * gaussian(rng)).collect());
            vectors.insert(sites[1], (0..n_heads * d_head).map(|_| scale * gaussian(rng)).collect());
            BankSample {
                key: SampleKey {
                    condition,
                    pair: i % 3,
                    question: i,
                },
                response_tokens: 1,
                vectors,
            }
        })
        .collect();
    ActivationBank {
        persona: "random".into(),
        n_heads,
        sites,
        samples,
        skipped: Vec::new(),
    }
}

/// Mean difference computed sample by sample in bank order.
fn brute_force(bank: &ActivationBank, site: Site) -> Vec<f32> {
    let (stored, slice) = match site {
        Site::Head(l, h) => (Site::HeadConcat(l), Some(h)),
        s => (s, None),
    };
    let row = |s: &BankSample| -> Vec<f32> {
        let v = &s.vectors[&stored];
        match slice {
            None => v.clone(),
            Some(h) => {
                let dk = v.len() / bank.n_heads;
                v[h * dk..(h + 1) * dk].to_vec()
            }
        }
    };
    let mean = |c: Condition| -> Vec<f64> {
        let rows: Vec<Vec<f32>> = bank.samples.iter().filter(|s| s.key.condition == c).map(row).collect();
        let mut acc = vec![0.0f64; rows[0].len()];
        for r in &rows {
            for (a, x) in acc.iter_mut().zip(r) {
                *a += f64::from(*x);
            }
        }
        acc.iter().map(|a| a / rows.len() as f64).collect()
    };
    let (t, n) = (mean(Condition::Target), mean(Condition::Neutral));
    t.iter().zip(&n).map(|(a, b)| (a - b) as f32).collect()
}

// 3. Diff-in-means against a brute-force oracle.
fn diff_in_means_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = 0.0f64;
    for draw in 0..100 {
        let bank = random_bank(&mut rng);
        let mut sites = vec![Site::MlpOutput(0), Site::HeadConcat(1)];
        sites.extend((0..bank.n_heads).map(|h| Site::Head(1, h)));
        let mut shuffled = bank.clone();
        shuffled.samples.shuffle(&mut rng);
        for site in sites {
            let got = diff_in_means(&bank, site).map_err(|e| e.to_string())?.direction;
            let want = brute_force(&bank, site);
            ensure!(
                got.iter().map(|x| x.to_bits()).eq(want.iter().map(|x| x.to_bits())),
                "draw {draw} {site}: not bit-identical"
            );
            let reordered = diff_in_means(&shuffled, site).map_err(|e| e.to_string())?.direction;
            let scale = bank
                .samples
                .iter()
                .flat_map(|s| s.vectors.values().flatten())
                .fold(0.0f64, |m, x| m.max(f64::from(x.abs())));
            let e = reordered
                .iter()
                .zip(&want)
                .map(|(a, b)| (f64::from(*a) - f64::from(*b)).abs())
                .fold(0.0, f64::max)
                / scale.max(1e-30);
            worst = worst.max(e);
            ensure!(e <= 1e-6, "draw {draw} {site}: reordered relative error {e:.2e}");
        }
    }
    Ok(format!("100 banks bit-identical in order, worst reordered error {worst:.2e}"))
}

fn small_persona() -> PersonaSpec {
    PersonaSpec {
        name: "curt".into(),
        definition: "short and blunt".into(),
        prompt_pairs: vec![
            PromptPair {
                target_system: "be curt".into(),
                neutral_system: "be kind".into(),
            },
            PromptPair {
                target_system: "be blunt".into(),
                neutral_system: "be gentle".into(),
            },
        ],
        extraction_questions: vec!["why".into(), "how so".into(), "what now".into()],
        eval_questions: vec!["ok".into()],
        markers: None,
    }
}

struct PlantedRun {
    spec: PlantedModelSpec,
    fixture: PlantedModel,
    model: Model,
    vectors: VectorSet,
    table: ContributionTable,
}

fn planted(seed: u64) -> Result<PlantedRun, String> {
    let spec = PlantedModelSpec::reference(seed);
    let fixture = build_planted_model(&spec, seed).map_err(|e| e.to_string())?;
    let model = Model::new(fixture.config.clone(), &fixture.weights).map_err(|e| e.to_string())?;
    let params = ExtractionParams {
        max_new: 24,
        temperature: 1.0,
        seed,
    };
    let sites = default_sites(fixture.config.n_layers);
    let bank = collect(&model, &Tokenizer::bytes(), &fixture.persona, &sites, &params).map_err(|e| e.to_string())?;
    let vectors = VectorSet::from_bank(&bank).map_err(|e| e.to_string())?;
    let table = ContributionTable::from_vectors(&vectors, &model).map_err(|e| e.to_string())?;
    Ok(PlantedRun {
        spec,
        fixture,
        model,
        vectors,
        table,
    })
}

// 4. Contribution rows sum to the squared aggregate norm; planted argmax.
fn contribution_scores() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let persona = small_persona();
    let mut worst = 0.0f64;
    for draw in 0..20 {
        let cfg = random_config(&mut rng);
        let model = Model::random(cfg.clone(), rng.random()).map_err(|e| e.to_string())?;
        let tok = Tokenizer::with_pieces(Vec::<String>::new());
        let layer = rng.random_range(0..cfg.n_layers);
        let params = ExtractionParams {
            max_new: 4,
            temperature: 1.0,
            seed: rng.random(),
        };
        let bank = collect(&model, &tok, &persona, &[Site::HeadConcat(layer), Site::AttnOutput(layer)], &params)
            .map_err(|e| e.to_string())?;
        let row = head_contributions(&bank, layer, &model).map_err(|e| e.to_string())?;
        let agg = diff_in_means(&bank, Site::AttnOutput(layer)).map_err(|e| e.to_string())?.direction;
        let want = norm(&agg).powi(2);
        let got: f64 = row.iter().sum();
        let e = (got - want).abs() / want.max(1e-30);
        worst = worst.max(e);
        ensure!(e <= 1e-4, "draw {draw}: row sum {got} vs {want}");
    }
    let mut hits = 0;
    let mut misses = Vec::new();
    for seed in 0..20 {
        let run = planted(seed)?;
        if run.table.argmax() == Some((run.spec.planted_layer, run.spec.planted_head)) {
            hits += 1;
        } else {
            misses.push(seed);
        }
    }
    ensure!(hits >= 19, "planted argmax found in {hits}/20 seeds (missed {misses:?})");
    Ok(format!("20 banks, worst row-sum error {worst:.2e}; planted argmax {hits}/20"))
}

fn random_frontier(rng: &mut ChaCha8Rng, label: &str) -> Frontier {
    let n = rng.random_range(1..10);
    let pts: Vec<(f64, f64)> = (0..n).map(|_| (rng.random_range(0.0..100.0), rng.random_range(5.0..100.0))).collect();
    Frontier::new(label, &pts)
}

/// Mean upper envelope over a uniform midpoint grid of `n` coherency samples.
fn sampled_score(frontiers: &[Frontier], target: &Frontier, tau: f64, n: usize) -> f64 {
    let ceiling = frontiers
        .iter()
        .chain(std::iter::once(target))
        .map(|f| f.points.iter().map(|p| p.coherency).fold(f64::NEG_INFINITY, f64::max))
        .fold(f64::INFINITY, f64::min);
    let width = (ceiling - tau) / n as f64;
    let mut total = 0.0;
    for k in 0..n {
        let c = tau + (k as f64 + 0.5) * width;
        let best = target
            .points
            .iter()
            .filter(|p| p.coherency >= c)
            .map(|p| p.trait_score)
            .fold(f64::NEG_INFINITY, f64::max);
        total += best;
    }
    total / n as f64
}

// 5. Envelope metric against sampling, a hand example and dominated points.
fn envelope_metric() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut worst = 0.0f64;
    for draw in 0..100 {
        let frontiers: Vec<Frontier> = (0..3).map(|i| random_frontier(&mut rng, &format!("f{i}"))).collect();
        let ceiling = frontiers
            .iter()
            .map(|f| f.max_coherency().unwrap())
            .fold(f64::INFINITY, f64::min);
        let tau = ceiling * rng.random_range(0.0..0.95);
        for target in &frontiers {
            let got = envelope_score(&frontiers, target, tau, EnvelopeVariant::Upper).map_err(|e| e.to_string())?;
            let want = sampled_score(&frontiers, target, tau, 100_000);
            worst = worst.max((got - want).abs());
            ensure!((got - want).abs() <= 0.05, "draw {draw}: exact {got} vs sampled {want}");
        }
    }
    let hand = Frontier::new("hand", &[(60.0, 85.0), (10.0, 90.0)]);
    let score = envelope_score(std::slice::from_ref(&hand), &hand, 80.0, EnvelopeVariant::Upper).map_err(|e| e.to_string())?;
    ensure!(score == 35.0, "two-step example gave {score}, expected 35.0");
    for draw in 0..1000 {
        let frontiers: Vec<Frontier> = (0..2).map(|i| random_frontier(&mut rng, &format!("g{i}"))).collect();
        let ceiling = frontiers.iter().map(|f| f.max_coherency().unwrap()).fold(f64::INFINITY, f64::min);
        let tau = ceiling * rng.random_range(0.0..0.95);
        let before = envelope_score(&frontiers, &frontiers[0], tau, EnvelopeVariant::Upper).map_err(|e| e.to_string())?;
        let mut mutated = frontiers.clone();
        let dom = mutated[0].points.choose(&mut rng).unwrap().clone();
        mutated[0].points.push(ParetoPoint {
            trait_score: dom.trait_score * rng.random_range(0.0..=1.0),
            coherency: dom.coherency * rng.random_range(0.0..=1.0),
            coefficient: -1.0,
            label: dom.label.clone(),
        });
        let after = envelope_score(&mutated, &mutated[0], tau, EnvelopeVariant::Upper).map_err(|e| e.to_string())?;
        ensure!((before - after).abs() <= 1e-9, "mutation {draw}: {before} became {after}");
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(5), "took {elapsed:.2?}");
    Ok(format!("worst sampling gap {worst:.4}; 35.0 exact; 1000 dominated mutations invariant"))
}

fn experiment<'a>(run: &'a PlantedRun, tok: &'a Tokenizer, judge: &'a SyntheticJudge) -> Experiment<'a> {
    Experiment {
        model: &run.model,
        tokenizer: tok,
        persona: &run.fixture.persona,
        judge,
    }
}

fn selection(run: &PlantedRun) -> Result<HeadSelection, String> {
    select_heads(&run.table, run.spec.planted_layer, 1, 0).map_err(|e| e.to_string())
}

// 6. Head-site steering beats residual steering on the planted model.
fn planted_end_to_end() -> Outcome {
    let start = Instant::now();
    let tok = Tokenizer::bytes();
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 0..5 {
        let run = planted(seed)?;
        let judge = SyntheticJudge::new(run.fixture.persona.markers.as_ref().unwrap()).map_err(|e| e.to_string())?;
        let exp = experiment(&run, &tok, &judge);
        let heads = selection(&run)?;
        let mut frontiers = Vec::new();
        for (set, coefficients) in [
            (SiteSet::HeadCor, HEAD_COEFFICIENTS.to_vec()),
            (SiteSet::MlpResidual, GLOBAL_COEFFICIENTS.to_vec()),
        ] {
            let plan = ExperimentPlan {
                persona: run.fixture.persona.name.clone(),
                configuration: Configuration::NeutralPlusAlpha,
                site_set: set,
                layer: run.spec.planted_layer,
                heads: Some(heads.clone()),
                coefficients,
                params: RunParams {
                    runs: 3,
                    max_new: 48,
                    temperature: 1.0,
                    seed,
                },
            };
            let result = exp.run_sweep(&run.vectors, &plan).map_err(|e| e.to_string())?;
            frontiers.push(build_frontier(&result.records).map_err(|e| e.to_string())?);
        }
        let score = |f: &Frontier| envelope_score(&frontiers, f, 80.0, EnvelopeVariant::Upper);
        let (head, resid) = (score(&frontiers[0]), score(&frontiers[1]));
        match (head, resid) {
            (Ok(h), Ok(r)) => {
                if h > r {
                    wins += 1;
                }
                lines.push(format!("{h:.2}/{r:.2}"));
            }
            (h, r) => lines.push(format!("{h:?}/{r:?}")),
        }
    }
    let elapsed = start.elapsed();
    let detail = format!("head/residual scores [{}], head wins {wins}/5 in {elapsed:.1?}", lines.join(", "));
    ensure!(wins >= 4, "{detail}");
    ensure!(elapsed < Duration::from_secs(120), "{detail}");
    Ok(detail)
}

fn rms(x: &[f32], g: &[f32], eps: f32) -> Vec<f32> {
    let ms = x.iter().map(|v| f64::from(*v).powi(2)).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + f64::from(eps)).sqrt();
    x.iter().zip(g).map(|(v, g)| (f64::from(*v) * inv * f64::from(*g)) as f32).collect()
}

fn mul(x: &[f32], w: &[f32], out: usize) -> Vec<f32> {
    (0..out)
        .map(|j| x.iter().enumerate().map(|(i, xi)| f64::from(*xi) * f64::from(w[i * out + j])).sum::<f64>() as f32)
        .collect()
}

/// Logits of the model with every attention sub-layer removed.
fn mlp_only_logits(model: &Model, toks: &[u32]) -> Vec<Vec<f32>> {
    let c = model.config();
    let w = model.weights();
    let t = |n: &str| w.get(n).unwrap().data.clone();
    let embed = t("embed");
    toks.iter()
        .map(|tok| {
            let at = *tok as usize * c.d_model;
            let mut h = embed[at..at + c.d_model].to_vec();
            for l in 0..c.n_layers {
                let x = rms(&h, &t(&format!("layers.{l}.mlp_norm")), c.norm_eps);
                let g = mul(&x, &t(&format!("layers.{l}.gate_proj")), c.d_mlp);
                let u = mul(&x, &t(&format!("layers.{l}.up_proj")), c.d_mlp);
                let a: Vec<f32> = g.iter().zip(&u).map(|(g, u)| g / (1.0 + (-g).exp()) * u).collect();
                for (hi, o) in h.iter_mut().zip(mul(&a, &t(&format!("layers.{l}.down_proj")), c.d_model)) {
                    *hi += o;
                }
            }
            mul(&rms(&h, &t("final_norm"), c.norm_eps), &t("unembed"), c.vocab_size)
        })
        .collect()
}

// 7. Zero ablation: whole-attention oracle and planted-head collapse.
fn zero_ablation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    for draw in 0..5 {
        let cfg = random_config(&mut rng);
        let model = Model::random(cfg.clone(), rng.random()).map_err(|e| e.to_string())?;
        let toks = random_tokens(&mut rng, 9, cfg.vocab_size);
        let ivs: Vec<Intervention> = (0..cfg.n_layers)
            .flat_map(|l| (0..cfg.n_heads).map(move |h| Intervention::zero(Site::Head(l, h))))
            .collect();
        let capture: Vec<Site> = (0..cfg.n_layers).map(Site::AttnOutput).collect();
        let trace = model
            .forward(&toks, &capture, &Steering::new(&model, &ivs, 0).unwrap())
            .map_err(|e| e.to_string())?;
        for site in &capture {
            ensure!(
                trace.get(site).unwrap().iter().flatten().all(|v| *v == 0.0),
                "draw {draw}: {site} is not exactly zero"
            );
        }
        for (got, want) in trace.logits.iter().zip(mlp_only_logits(&model, &toks)) {
            let e = rel_err(got, &want);
            ensure!(e <= 1e-5, "draw {draw}: logits differ from the MLP-only forward ({e:.2e})");
        }
    }
    let tok = Tokenizer::bytes();
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    for seed in 0..5 {
        let run = planted(seed)?;
        let judge = SyntheticJudge::new(run.fixture.persona.markers.as_ref().unwrap()).map_err(|e| e.to_string())?;
        let params = RunParams {
            runs: 5,
            max_new: 48,
            temperature: 1.0,
            seed,
        };
        let curve = experiment(&run, &tok, &judge)
            .run_zero_ablation(&[selection(&run)?], &params)
            .map_err(|e| e.to_string())?;
        let last = curve.steps.last().unwrap();
        lines.push(format!(
            "{:.1}->{:.1} (neutral {:.1}, coherency {:.1})",
            curve.steps[0].mean_trait, last.mean_trait, curve.neutral_trait, last.mean_coherency
        ));
        if (last.mean_trait - curve.neutral_trait).abs() > 5.0 || last.mean_coherency < 95.0 {
            failures.push(seed);
        }
    }
    let detail = format!("MLP-only oracle on 5 models; planted trait {}", lines.join(", "));
    ensure!(failures.is_empty(), "seeds {failures:?} out of tolerance: {detail}");
    Ok(detail)
}

/// Returns one fixed list of alternatives for every request.
struct Canned(Vec<TopLogprob>);

impl Transport for Canned {
    fn top_logprobs(&self, _: &ChatRequest) -> Result<Vec<TopLogprob>, TransportError> {
        Ok(self.0.clone())
    }
}

fn alt(token: &str, p: f64) -> TopLogprob {
    TopLogprob {
        token: token.into(),
        logprob: p.ln(),
    }
}

// 8. Logit-weighted judge scores through a mocked transport.
fn judge_client() -> Outcome {
    let config = LlmJudgeConfig {
        endpoint: "http://mock.invalid/v1".into(),
        model: "mock".into(),
        api_key_env: "UNUSED".into(),
        max_in_flight: 2,
        max_retries: 0,
        backoff_ms: 0,
        timeout_secs: 1,
    };
    let persona = small_persona();
    let mut filler: Vec<TopLogprob> = vec![alt("50", 0.1), alt("100", 0.05)];
    filler.extend((0..18).map(|i| alt(&format!("tok{i}"), 0.01)));
    filler.push(alt("0", 0.6));
    let cases = [
        (vec![alt("80", 0.5), alt("90", 0.3), alt("70", 0.2)], 81.0),
        (
            vec![alt("85", 0.4), alt(" 90", 0.2), alt("abc", 0.2), alt("8.5", 0.1), alt("101", 0.05), alt("-5", 0.05)],
            (0.4 * 85.0 + 0.2 * 90.0) / 0.6,
        ),
        (filler, (0.1 * 50.0 + 0.05 * 100.0) / 0.15),
    ];
    let request = JudgeRequest {
        sample_id: "mock/0",
        question: "ok",
        response: "fine.",
        nll_steered: f64::NAN,
        nll_base: f64::NAN,
    };
    let mut got = Vec::new();
    for (i, (top, want)) in cases.into_iter().enumerate() {
        let judge = LlmJudge::new(&config, &persona, Box::new(Canned(top))).map_err(|e| e.to_string())?;
        for kind in [ScoreKind::Trait, ScoreKind::Coherency] {
            let s = judge.score(&request, kind).map_err(|e| e.to_string())?.value;
            ensure!((s - want).abs() <= 1e-9, "case {i} {kind:?}: {s} vs {want}");
        }
        got.push(format!("{want:.4}"));
    }
    Ok(format!("3 crafted cases match: {}", got.join(", ")))
}

fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let Ok(entries) = fs::read_dir(&dir) else { continue };
        for entry in entries.flatten() {
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
            } else if let Ok(bytes) = fs::read(&path) {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), bytes);
            }
        }
    }
    out
}

// 9. `extract` + `steer` twice produce identical artifact trees.
fn determinism() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_headsteer");
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let fx = tmp.path().join("fx");
    let status = |args: &[&str]| -> Result<(), String> {
        let out = Command::new(bin).args(args).env("RUST_LOG", "warn").output().map_err(|e| e.to_string())?;
        ensure!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        Ok(())
    };
    status(&["fixture", "--out", fx.to_str().unwrap(), "--seed", "0"])?;
    let config = fx.join("config.json");
    let mut trees = Vec::new();
    for name in ["first", "second"] {
        let outdir = tmp.path().join(name);
        for cmd in ["extract", "steer"] {
            status(&[
                cmd,
                "-c",
                config.to_str().unwrap(),
                "--outdir",
                outdir.to_str().unwrap(),
                "--runs",
                "1",
                "--max-new",
                "16",
                "--layer",
                "2",
                "--site-set",
                "mlp_residual",
                "--site-set",
                "attn_output",
            ])?;
        }
        trees.push(snapshot(&outdir));
    }
    ensure!(!trees[0].is_empty(), "no artifacts written");
    ensure!(trees[0] == trees[1], "artifact trees differ");
    let bytes: usize = trees[0].values().map(Vec::len).sum();
    Ok(format!("{} files, {bytes} bytes identical", trees[0].len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("head decomposition identity", head_decomposition),
        ("head-site equivalence", head_site_equivalence),
        ("diff-in-means oracle", diff_in_means_oracle),
        ("contribution row-sum and planted argmax", contribution_scores),
        ("envelope metric", envelope_metric),
        ("planted-head end-to-end", planted_end_to_end),
        ("zero-ablation oracle", zero_ablation),
        ("judge client", judge_client),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = check();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {} PASS {name} ({secs:.1}s): {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} FAIL {name} ({secs:.1}s): {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {}/{} passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
