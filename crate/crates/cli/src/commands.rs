// SPDX-License-Identifier: MIT OR Apache-2.0

//! One function per subcommand. Each reads its inputs from the config and
//! from earlier commands' artifact directories and writes only into its own.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use headsteer::evaluation::{
    build_frontier, envelope_score, frontiers_svg, points_csv, Frontier, Judge, LlmJudge, SyntheticJudge,
};
use headsteer::extraction::{collect, default_sites, ExtractionParams, VectorSet};
use headsteer::fixtures::{build_planted_model, PlantedModelSpec};
use headsteer::localization::{
    layer_similarity, select_heads, transition_layer, ContributionTable, HeadSelection, SimilarityMatrix,
};
use headsteer::persona::PersonaSpec;
use headsteer::refmodel::Model;
use headsteer::sites::Site;
use headsteer::steering::{
    records_jsonl, summary_csv, AblationCurve, Experiment, ExperimentPlan, RunParams, RunRecord,
};
use headsteer::tokenizer::Tokenizer;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::{JudgeSelection, RunConfig};
use crate::error::{CliError, CliResult};

/// Everything loaded from the config before a command runs.
struct Context {
    model: Model,
    tokenizer: Tokenizer,
    persona: PersonaSpec,
}

impl Context {
    fn load(cfg: &RunConfig) -> CliResult<Self> {
        cfg.validate()?;
        let persona = PersonaSpec::load(&cfg.persona).map_err(|e| CliError::config(e.to_string()))?;
        persona.validate().map_err(|e| CliError::config(e.to_string()))?;
        let model = Model::load(&cfg.model).map_err(|e| CliError::config(e.to_string()))?;
        let tokenizer = match &cfg.vocab {
            Some(p) => Tokenizer::from_vocab_file(p).map_err(|e| CliError::config(e.to_string()))?,
            None => Tokenizer::bytes(),
        };
        if tokenizer.vocab_size() > model.config().vocab_size {
            return Err(CliError::config(format!(
                "tokenizer has {} tokens but the model vocabulary is {}",
                tokenizer.vocab_size(),
                model.config().vocab_size
            )));
        }
        Ok(Self {
            model,
            tokenizer,
            persona,
        })
    }

    fn judge(&self, cfg: &RunConfig) -> CliResult<Box<dyn Judge>> {
        match &cfg.judge {
            JudgeSelection::Synthetic => {
                let markers = self.persona.markers.as_ref().ok_or_else(|| {
                    CliError::config(format!("persona `{}` has no synthetic markers", self.persona.name))
                })?;
                let judge = SyntheticJudge::new(markers).map_err(|e| CliError::config(e.to_string()))?;
                Ok(Box::new(judge))
            }
            JudgeSelection::Llm(j) => {
                let judge = LlmJudge::http(j, &self.persona).map_err(|e| CliError::config(e.to_string()))?;
                Ok(Box::new(judge))
            }
        }
    }

    fn experiment<'a>(&'a self, judge: &'a dyn Judge) -> Experiment<'a> {
        Experiment {
            model: &self.model,
            tokenizer: &self.tokenizer,
            persona: &self.persona,
            judge,
        }
    }
}

fn persona_name(cfg: &RunConfig) -> CliResult<String> {
    let persona = PersonaSpec::load(&cfg.persona).map_err(|e| CliError::config(e.to_string()))?;
    Ok(persona.name)
}

/// `<outdir>/<persona>/<command>`.
pub fn command_dir(cfg: &RunConfig, persona: &str, command: &str) -> PathBuf {
    cfg.outdir.join(persona).join(command)
}

/// Creates `dir` empty, removing any previous contents.
fn fresh_dir(dir: &Path) -> CliResult<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(headsteer::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| io_error(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.into()))?;
    write_text(path, &(text + "\n"))
}

fn read_json<T: DeserializeOwned>(path: &Path, producer: &str) -> CliResult<T> {
    if !path.is_file() {
        return Err(CliError::missing_input(path, producer));
    }
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

fn load_vectors(cfg: &RunConfig, persona: &str) -> CliResult<VectorSet> {
    let path = command_dir(cfg, persona, "extract").join("vectors.json");
    if !path.is_file() {
        return Err(CliError::missing_input(&path, "extract"));
    }
    let vectors = VectorSet::load(&path).map_err(|e| CliError::config(e.to_string()))?;
    if vectors.vectors.is_empty() {
        return Err(CliError::config(format!("{} holds no vectors", path.display())));
    }
    Ok(vectors)
}

#[derive(Debug, Serialize, Deserialize)]
struct ExtractSummary {
    persona: String,
    target_samples: usize,
    neutral_samples: usize,
    skipped: usize,
    sites: Vec<Site>,
}

pub fn extract(cfg: &RunConfig) -> CliResult<PathBuf> {
    let ctx = Context::load(cfg)?;
    let n_layers = ctx.model.config().n_layers;
    let sites = cfg.sites.clone().unwrap_or_else(|| default_sites(n_layers));
    let params = ExtractionParams {
        max_new: cfg.extraction.max_new,
        temperature: cfg.extraction.temperature,
        seed: cfg.seed,
    };
    let bank = collect(&ctx.model, &ctx.tokenizer, &ctx.persona, &sites, &params)?;
    let vectors = VectorSet::from_bank(&bank)?;
    let dir = command_dir(cfg, &ctx.persona.name, "extract");
    fresh_dir(&dir)?;
    bank.save(&dir.join("bank.json"))?;
    vectors.save(&dir.join("vectors.json"))?;
    write_text(&dir.join("config.json"), &cfg.echo()?)?;
    write_json(
        &dir.join("summary.json"),
        &ExtractSummary {
            persona: bank.persona.clone(),
            target_samples: bank.count(headsteer::persona::Condition::Target),
            neutral_samples: bank.count(headsteer::persona::Condition::Neutral),
            skipped: bank.skipped.len(),
            sites: vectors.vectors.keys().copied().collect(),
        },
    )?;
    log::info!("extract: {} vectors written to {}", vectors.vectors.len(), dir.display());
    Ok(dir)
}

fn present(sites: Vec<Site>, vectors: &VectorSet) -> Vec<Site> {
    sites.into_iter().filter(|s| vectors.vectors.contains_key(s)).collect()
}

fn write_matrix(dir: &Path, stem: &str, m: &SimilarityMatrix) -> CliResult<()> {
    write_text(&dir.join(format!("{stem}.csv")), &m.to_csv())?;
    write_json(&dir.join(format!("{stem}.json")), m)
}

pub fn localize(cfg: &RunConfig) -> CliResult<PathBuf> {
    let ctx = Context::load(cfg)?;
    let name = ctx.persona.name.clone();
    let vectors = load_vectors(cfg, &name)?;
    let n_layers = ctx.model.config().n_layers;
    let dir = command_dir(cfg, &name, "localize");
    fresh_dir(&dir)?;

    let inputs = present(Site::sublayer_inputs(n_layers), &vectors);
    let mut transition = None;
    if !inputs.is_empty() {
        let m = layer_similarity(&vectors, &inputs)?;
        transition = transition_layer(&m, cfg.localization.transition_threshold)?;
        write_matrix(&dir, "similarity_inputs", &m)?;
    }
    let outputs = present(Site::sublayer_outputs(n_layers), &vectors);
    if !outputs.is_empty() {
        write_matrix(&dir, "similarity_outputs", &layer_similarity(&vectors, &outputs)?)?;
    }
    write_json(&dir.join("transition.json"), &transition)?;

    let table = ContributionTable::from_vectors(&vectors, &ctx.model)?;
    write_text(&dir.join("contributions.csv"), &table.to_csv())?;
    write_json(&dir.join("contributions.json"), &table)?;
    let layer = match cfg.localization.layer {
        Some(l) => l,
        None => table.argmax().map(|(l, _)| l).ok_or_else(|| CliError::config("contribution table is empty"))?,
    };
    let n_heads = ctx.model.config().n_heads;
    let selection = select_heads(
        &table,
        layer,
        cfg.localization.k_pos.min(n_heads),
        cfg.localization.k_neg.min(n_heads),
    )?;
    write_json(&dir.join("selection.json"), &selection)?;
    write_text(&dir.join("config.json"), &cfg.echo()?)?;
    log::info!("localize: layer {layer}, heads {:?}", selection.correlated);
    Ok(dir)
}

fn load_selection(cfg: &RunConfig, persona: &str) -> CliResult<HeadSelection> {
    read_json(&command_dir(cfg, persona, "localize").join("selection.json"), "localize")
}

fn run_params(cfg: &RunConfig) -> RunParams {
    RunParams {
        runs: cfg.steering.runs,
        max_new: cfg.steering.max_new,
        temperature: cfg.steering.temperature,
        seed: cfg.seed,
    }
}

pub fn steer(cfg: &RunConfig) -> CliResult<PathBuf> {
    let ctx = Context::load(cfg)?;
    let judge = ctx.judge(cfg)?;
    let name = ctx.persona.name.clone();
    let vectors = load_vectors(cfg, &name)?;
    let selection_path = command_dir(cfg, &name, "localize").join("selection.json");
    let selection = if selection_path.is_file() {
        Some(load_selection(cfg, &name)?)
    } else {
        None
    };
    let layer = cfg
        .steering
        .layer
        .or(selection.as_ref().map(|s| s.criterion.layer))
        .ok_or_else(|| CliError::config("steering.layer is unset and no head selection exists; run `headsteer localize` or set a layer"))?;

    let mut plans = Vec::new();
    for set in &cfg.steering.site_sets {
        if let Err(e) = set.resolve(layer, selection.as_ref()) {
            return Err(match selection {
                None => CliError::missing_input(&selection_path, "localize"),
                Some(_) => CliError::config(e.to_string()),
            });
        }
        let mut coefficients = cfg.steering.coefficients.clone().unwrap_or_else(|| set.default_coefficients());
        if cfg.steering.zero_row && !coefficients.contains(&0.0) {
            coefficients.insert(0, 0.0);
        }
        let plan = ExperimentPlan {
            persona: name.clone(),
            configuration: cfg.steering.configuration,
            site_set: set.clone(),
            layer,
            heads: selection.clone(),
            coefficients,
            params: run_params(cfg),
        };
        plan.validate().map_err(|e| CliError::config(e.to_string()))?;
        plans.push(plan);
    }

    let exp = ctx.experiment(judge.as_ref());
    let mut records = Vec::new();
    let mut baseline = Vec::new();
    for plan in &plans {
        let result = exp.run_sweep(&vectors, plan)?;
        log::info!("steer: {} done ({} cells)", plan.site_set.label(), result.records.len());
        if baseline.is_empty() {
            baseline = result.baseline;
        }
        records.extend(result.records);
    }
    let dir = command_dir(cfg, &name, "steer");
    fresh_dir(&dir)?;
    write_text(&dir.join("records.jsonl"), &records_jsonl(&records)?)?;
    write_text(&dir.join("baseline.jsonl"), &records_jsonl(&baseline)?)?;
    let mut summary = summary_csv(&baseline);
    summary.push_str(summary_csv(&records).split_once('\n').map_or("", |(_, rest)| rest));
    write_text(&dir.join("summary.csv"), &summary)?;
    write_json(&dir.join("plans.json"), &plans)?;
    write_text(&dir.join("config.json"), &cfg.echo()?)?;
    Ok(dir)
}

pub fn ablate(cfg: &RunConfig) -> CliResult<PathBuf> {
    let ctx = Context::load(cfg)?;
    let judge = ctx.judge(cfg)?;
    let name = ctx.persona.name.clone();
    let table: ContributionTable =
        read_json(&command_dir(cfg, &name, "localize").join("contributions.json"), "localize")?;
    let layers = if cfg.ablation.layers.is_empty() {
        vec![load_selection(cfg, &name)?.criterion.layer]
    } else {
        cfg.ablation.layers.clone()
    };
    let n_heads = ctx.model.config().n_heads;
    let k = cfg.ablation.k.unwrap_or(cfg.localization.k_pos).min(n_heads);
    let selections = layers
        .iter()
        .map(|l| select_heads(&table, *l, k, 0).map_err(|e| CliError::config(e.to_string())))
        .collect::<CliResult<Vec<_>>>()?;
    let curve = ctx.experiment(judge.as_ref()).run_zero_ablation(&selections, &run_params(cfg))?;
    let dir = command_dir(cfg, &name, "ablate");
    fresh_dir(&dir)?;
    write_json(&dir.join("curve.json"), &curve)?;
    write_text(&dir.join("steps.csv"), &ablation_csv(&curve))?;
    write_text(&dir.join("config.json"), &cfg.echo()?)?;
    Ok(dir)
}

fn ablation_csv(curve: &AblationCurve) -> String {
    let mut out = String::from("step,heads,mean_trait,mean_coherency\n");
    for s in &curve.steps {
        let heads: Vec<String> = s.heads.iter().map(|(l, h)| format!("{l}:{h}")).collect();
        writeln!(out, "{},{},{:.6},{:.6}", s.step, heads.join(";"), s.mean_trait, s.mean_coherency).unwrap();
    }
    writeln!(out, "neutral,,{:.6},{:.6}", curve.neutral_trait, curve.neutral_coherency).unwrap();
    out
}

fn read_records(path: &Path) -> CliResult<Vec<RunRecord>> {
    if !path.is_file() {
        return Err(CliError::missing_input(path, "steer"));
    }
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| CliError::config(format!("{}: {e}", path.display()))))
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EnvelopeRow {
    site_set: String,
    score: Option<f64>,
    /// Why no score could be computed.
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

pub fn pareto(cfg: &RunConfig) -> CliResult<PathBuf> {
    cfg.validate()?;
    let name = persona_name(cfg)?;
    let records = read_records(&command_dir(cfg, &name, "steer").join("records.jsonl"))?;
    let mut labels: Vec<String> = Vec::new();
    for r in &records {
        if !labels.contains(&r.site_set) {
            labels.push(r.site_set.clone());
        }
    }
    let frontiers = labels
        .iter()
        .map(|label| {
            let group: Vec<RunRecord> = records.iter().filter(|r| &r.site_set == label).cloned().collect();
            build_frontier(&group)
        })
        .collect::<headsteer::Result<Vec<Frontier>>>()?;
    let rows: Vec<EnvelopeRow> = frontiers
        .iter()
        .map(|f| match envelope_score(&frontiers, f, cfg.pareto.tau, cfg.pareto.variant) {
            Ok(s) => EnvelopeRow {
                site_set: f.label.clone(),
                score: Some(s),
                error: None,
            },
            Err(e) => EnvelopeRow {
                site_set: f.label.clone(),
                score: None,
                error: Some(e.to_string()),
            },
        })
        .collect();
    let dir = command_dir(cfg, &name, "pareto");
    fresh_dir(&dir)?;
    write_json(&dir.join("frontiers.json"), &frontiers)?;
    write_text(&dir.join("points.csv"), &points_csv(&frontiers))?;
    write_text(&dir.join("frontiers.svg"), &frontiers_svg(&frontiers)?)?;
    let mut csv = format!("site_set,score_tau_{}\n", cfg.pareto.tau);
    for r in &rows {
        writeln!(csv, "{},{}", r.site_set, r.score.map_or(String::new(), |s| format!("{s:.6}"))).unwrap();
    }
    write_text(&dir.join("scores.csv"), &csv)?;
    write_json(&dir.join("scores.json"), &rows)?;
    write_text(&dir.join("config.json"), &cfg.echo()?)?;
    Ok(dir)
}

pub fn report(cfg: &RunConfig) -> CliResult<PathBuf> {
    cfg.validate()?;
    let name = persona_name(cfg)?;
    let mut md = format!("# Report: {name}\n\n");
    let mut found = 0;

    let extract = command_dir(cfg, &name, "extract").join("summary.json");
    md.push_str("## Extraction\n\n");
    if extract.is_file() {
        let s: ExtractSummary = read_json(&extract, "extract")?;
        writeln!(
            md,
            "{} target and {} neutral samples ({} skipped); {} vectors.\n",
            s.target_samples,
            s.neutral_samples,
            s.skipped,
            s.sites.len()
        )
        .unwrap();
        found += 1;
    } else {
        md.push_str("Not run.\n\n");
    }

    let localize = command_dir(cfg, &name, "localize");
    md.push_str("## Localization\n\n");
    if localize.join("selection.json").is_file() {
        let table: ContributionTable = read_json(&localize.join("contributions.json"), "localize")?;
        let selection = load_selection(cfg, &name)?;
        let transition: Option<headsteer::localization::Transition> =
            read_json(&localize.join("transition.json"), "localize")?;
        if let Some((l, h)) = table.argmax() {
            writeln!(md, "Top contribution: layer {l}, head {h}.").unwrap();
        }
        let heads: Vec<String> = selection.correlated.iter().map(|(l, h)| format!("{l}:{h}")).collect();
        writeln!(md, "Selected heads: {}.", heads.join(", ")).unwrap();
        match transition {
            Some(t) => writeln!(md, "Residual transition at {} (layer {}).\n", t.site, t.layer).unwrap(),
            None => md.push_str("No stable residual block.\n\n"),
        }
        found += 1;
    } else {
        md.push_str("Not run.\n\n");
    }

    let pareto = command_dir(cfg, &name, "pareto").join("scores.json");
    md.push_str("## Envelope scores\n\n");
    if pareto.is_file() {
        let rows: Vec<EnvelopeRow> = read_json(&pareto, "pareto")?;
        writeln!(md, "| site set | score (tau = {}) |\n|---|---|", cfg.pareto.tau).unwrap();
        for r in rows {
            let score = r.score.map_or_else(|| r.error.unwrap_or_default(), |s| format!("{s:.2}"));
            writeln!(md, "| {} | {score} |", r.site_set).unwrap();
        }
        md.push('\n');
        found += 1;
    } else {
        md.push_str("Not run.\n\n");
    }

    let ablate = command_dir(cfg, &name, "ablate").join("curve.json");
    md.push_str("## Zero ablation\n\n");
    if ablate.is_file() {
        let curve: AblationCurve = read_json(&ablate, "ablate")?;
        md.push_str("| step | heads | trait | coherency |\n|---|---|---|---|\n");
        for s in &curve.steps {
            let heads: Vec<String> = s.heads.iter().map(|(l, h)| format!("{l}:{h}")).collect();
            writeln!(md, "| {} | {} | {:.2} | {:.2} |", s.step, heads.join(" "), s.mean_trait, s.mean_coherency).unwrap();
        }
        writeln!(md, "| neutral | | {:.2} | {:.2} |\n", curve.neutral_trait, curve.neutral_coherency).unwrap();
        found += 1;
    } else {
        md.push_str("Not run.\n\n");
    }

    if found == 0 {
        return Err(CliError::config(format!(
            "no artifacts under {}",
            cfg.outdir.join(&name).display()
        )));
    }
    let dir = command_dir(cfg, &name, "report");
    fresh_dir(&dir)?;
    write_text(&dir.join("report.md"), &md)?;
    Ok(dir)
}

/// Writes the planted-head model, its persona and a starter config into `dir`.
pub fn fixture(dir: &Path, seed: u64) -> CliResult<PathBuf> {
    let spec = PlantedModelSpec::reference(seed);
    let planted = build_planted_model(&spec, seed)?;
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    planted.weights.save(&planted.config, &dir.join("model.json"))?;
    planted.persona.save(&dir.join("persona.json"))?;
    write_json(&dir.join("spec.json"), &spec)?;
    let config = serde_json::json!({
        "model": "model.json",
        "persona": "persona.json",
        "extraction": {"max_new": 24},
        "localization": {"k_pos": 1},
        "steering": {"runs": 3, "max_new": 48},
        "judge": {"kind": "synthetic"},
        "outdir": "runs",
        "seed": seed,
    });
    write_json(&dir.join("config.json"), &config)?;
    Ok(dir.join("config.json"))
}
