//! Audit stages. Each stage reads its inputs from the output directory and
//! writes its artifacts there, stamped with the config hash, global seed,
//! stage name and tool version.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::attack::{self, run_key, AttackOutcome, Condition, ConditionSubspaces, SweepRow};
use crate::config::AuditConfig;
use crate::corpus::{self, split_of, Split, Utterance};
use crate::error::{Error, Result};
use crate::intervention::{self, InterventionReport};
use crate::io::{derive_seed, read_f32le, write_f32le, write_file, Provenance};
use crate::metrics::{self, DisparityRow};
use crate::model::{self, Model, TrainReport};
use crate::report::{self, AuditReport, ConditionSummary, Headline, InterventionSummary, SubspaceSummary};
use crate::subspace::{self, Selection, Subspace, SweepCell, SweepData};

pub const STAGES: [&str; 8] = ["gen", "train", "extract", "attack", "sweep-eps", "intervene", "report", "full-audit"];

/// Artifact locations under the output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("corpus/manifest.csv")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("model/checkpoint.json")
    }
    pub fn train_report(&self) -> PathBuf {
        self.root.join("model/train_report.json")
    }
    pub fn sweep_csv(&self) -> PathBuf {
        self.root.join("subspace/sweep.csv")
    }
    pub fn selection(&self) -> PathBuf {
        self.root.join("subspace/selection.json")
    }
    pub fn subspace(&self, name: &str) -> PathBuf {
        self.root.join(format!("subspace/{name}.json"))
    }
    pub fn outcomes(&self, condition: Condition) -> PathBuf {
        self.root.join(format!("attack/outcomes_{condition}.jsonl"))
    }
    pub fn wer_table(&self) -> PathBuf {
        self.root.join("attack/wer_table.csv")
    }
    pub fn coupling(&self) -> PathBuf {
        self.root.join("attack/coupling.csv")
    }
    pub fn attack_summary(&self) -> PathBuf {
        self.root.join("attack/summary.json")
    }
    pub fn attacked_audio(&self, id: &str) -> PathBuf {
        self.root.join(format!("attack/audio/accent/{id}.f32"))
    }
    pub fn eps_sweep_csv(&self) -> PathBuf {
        self.root.join("sweep/epsilon_sweep.csv")
    }
    pub fn eps_sweep_json(&self) -> PathBuf {
        self.root.join("sweep/epsilon_sweep.json")
    }
    pub fn intervention_csv(&self) -> PathBuf {
        self.root.join("intervention/intervention.csv")
    }
    pub fn intervention_json(&self) -> PathBuf {
        self.root.join("intervention/intervention.json")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }
}

/// Resolved config plus its hash and output layout.
#[derive(Clone, Debug)]
pub struct Audit {
    pub config: AuditConfig,
    pub hash: String,
    pub layout: Layout,
}

#[derive(Serialize, Deserialize)]
struct Stamped<T> {
    provenance: Provenance,
    #[serde(flatten)]
    body: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub selection: Selection,
    pub summary: SubspaceSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct InterventionRecord {
    report: InterventionReport,
    random_control_clean: DisparityRow,
}

#[derive(Serialize, Deserialize)]
struct SweepRecord {
    rows: Vec<SweepRow>,
}

#[derive(Serialize, Deserialize)]
struct AttackSummaryRecord {
    epsilon: f64,
    fingerprint: String,
    conditions: Vec<ConditionSummary>,
}

fn require(path: &Path, command: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingDependency {
            path: path.to_path_buf(),
            command,
        })
    }
}

fn read_json<T: DeserializeOwned>(path: &Path, command: &'static str) -> Result<T> {
    require(path, command)?;
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let stamped: Stamped<T> = serde_json::from_str(&text)?;
    Ok(stamped.body)
}

impl Audit {
    pub fn new(config: AuditConfig) -> Result<Self> {
        config.validate()?;
        let hash = config.hash();
        let layout = Layout::new(&config.output_dir);
        Ok(Self {
            config: config.resolved(),
            hash,
            layout,
        })
    }

    pub fn provenance(&self, stage: &str) -> Provenance {
        Provenance::new(&self.hash, self.config.global_seed, stage)
    }

    fn accents(&self) -> Vec<String> {
        self.config.corpus.accent_labels()
    }

    fn write_json<T: Serialize>(&self, path: &Path, stage: &str, body: T) -> Result<()> {
        let stamped = Stamped {
            provenance: self.provenance(stage),
            body,
        };
        let mut text = serde_json::to_string_pretty(&stamped)?;
        text.push('\n');
        write_file(path, text)
    }

    fn corpus(&self) -> Result<Vec<Utterance>> {
        let path = self.layout.manifest();
        require(&path, "gen")?;
        corpus::load_corpus(&path, self.config.corpus.sample_rate)
    }

    fn model(&self) -> Result<Model> {
        let path = self.layout.checkpoint();
        require(&path, "train")?;
        Model::load(&path)
    }

    fn subspaces(&self) -> Result<(Subspace, Subspace, Subspace)> {
        let load = |name: &str| {
            let path = self.layout.subspace(name);
            require(&path, "extract")?;
            Subspace::load(&path)
        };
        Ok((load("accent")?, load("random")?, load("permuted")?))
    }

    fn outcomes(&self, condition: Condition) -> Result<Vec<AttackOutcome>> {
        let path = self.layout.outcomes(condition);
        require(&path, "attack")?;
        let text = fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        text.lines()
            .skip(1)
            .filter(|l| !l.trim().is_empty())
            .map(|l| Ok(serde_json::from_str(l)?))
            .collect()
    }

    pub fn gen(&self) -> Result<()> {
        let utts = corpus::generate_corpus(&self.config.corpus)?;
        let dir = self.layout.manifest().parent().expect("manifest has a parent").to_path_buf();
        corpus::save_manifest(&utts, &dir, Some(&self.provenance("gen")))?;
        log::info!("wrote {} utterances to {}", utts.len(), dir.display());
        Ok(())
    }

    pub fn train(&self) -> Result<TrainReport> {
        let utts = self.corpus()?;
        let (model, report) = model::train(
            &split_of(&utts, Split::Train),
            &split_of(&utts, Split::Validation),
            &self.accents(),
            self.config.model.clone(),
            &self.config.train,
        )?;
        model.save(&self.layout.checkpoint(), Some(&self.provenance("train")))?;
        self.write_json(&self.layout.train_report(), "train", &report)?;
        log::info!(
            "trained {} epochs; validation WER {:.3}, disparity {:.1} pp",
            report.epochs_run,
            report.validation.mean_wer,
            report.validation.disparity_pp
        );
        Ok(report)
    }

    pub fn extract(&self) -> Result<SelectionRecord> {
        let utts = self.corpus()?;
        let model = self.model()?;
        let accents = self.accents();
        let a = accents.len();
        let cfg = &self.config.subspace;
        let fit_set = split_of(&utts, Split::Train);
        let held_set = split_of(&utts, Split::Validation);
        let eval_set = split_of(&utts, Split::Eval);
        let mut layers = cfg.layers.clone();
        layers.sort_unstable();
        layers.dedup();
        let fit = subspace::pooled_embeddings(&model, &fit_set, &layers)?;
        let held = subspace::pooled_embeddings(&model, &held_set, &layers)?;
        let fit_labels = subspace::label_indices(&fit_set, &accents)?;
        let held_labels = subspace::label_indices(&held_set, &accents)?;
        let eval_labels = subspace::label_indices(&eval_set, &accents)?;
        let held_wers: Vec<f64> = held_set
            .iter()
            .map(|u| metrics::wer(&model.transcribe(&u.samples())?, &u.text))
            .collect::<Result<_>>()?;
        let data = SweepData {
            fit: &fit,
            fit_labels: &fit_labels,
            held_out: &held,
            held_out_labels: &held_labels,
            held_out_wers: &held_wers,
            n_classes: a,
        };
        let cells = subspace::sweep(&data, cfg)?;
        let candidates: Vec<_> = cells.iter().filter_map(|c: &SweepCell| c.candidate.clone()).collect();
        let selection = subspace::select_layer_k(&candidates, cfg.stability_threshold_deg)?;
        let (accent, spec) = subspace::fit_selected(&data, cfg, &selection)?;
        let l = selection.layer;
        let x = &fit[&l];
        let random = subspace::random_subspace(l, selection.k, derive_seed(cfg.seed, "random"), x, &fit_labels, a)?;
        let permuted_seed = derive_seed(cfg.seed, "permuted");
        let permuted = subspace::permuted_label_subspace(l, x, &fit_labels, a, &spec, permuted_seed)?;
        let permuted_angle = subspace::split_half_stability(
            x,
            &subspace::permute_labels(&fit_labels, &subspace::seeded_permutation(fit_labels.len(), permuted_seed))?,
            a,
            &spec,
            derive_seed(cfg.seed, "permuted-stability"),
        )?;
        let eval_x = subspace::pooled_embeddings(&model, &eval_set, &[l])?.remove(&l).expect("layer present");
        let summary = SubspaceSummary {
            layer: l,
            k: selection.k,
            method: selection.method,
            ridge_lambda: selection.ridge_lambda,
            within_threshold: selection.within_threshold,
            validation_probe_accuracy: accent.diagnostics.probe_accuracy.unwrap_or(f64::NAN),
            eval_probe_accuracy: accent.probe_accuracy(&eval_x, &eval_labels)?,
            split_half_angle_deg: accent.diagnostics.split_half_angle_deg.unwrap_or(f64::NAN),
            wer_projection_r: accent.diagnostics.wer_projection_r,
            random_eval_probe_accuracy: random.probe_accuracy(&eval_x, &eval_labels)?,
            permuted_eval_probe_accuracy: permuted.probe_accuracy(&eval_x, &eval_labels)?,
            permuted_split_half_angle_deg: permuted_angle,
        };
        let p = self.provenance("extract");
        write_file(&self.layout.sweep_csv(), report::sweep_csv(&cells, Some(&p))?)?;
        accent.save(&self.layout.subspace("accent"), Some(&p))?;
        random.save(&self.layout.subspace("random"), Some(&p))?;
        permuted.save(&self.layout.subspace("permuted"), Some(&p))?;
        let record = SelectionRecord { selection, summary };
        self.write_json(&self.layout.selection(), "extract", &record)?;
        log::info!(
            "selected layer {} k {} ({}): eval probe accuracy {:.3}, split-half angle {:.1} deg",
            l,
            record.selection.k,
            record.selection.method,
            record.summary.eval_probe_accuracy,
            record.summary.split_half_angle_deg
        );
        Ok(record)
    }

    pub fn attack(&self) -> Result<Vec<ConditionSummary>> {
        let utts = self.corpus()?;
        let model = self.model()?;
        let (acc, rnd, per) = self.subspaces()?;
        let subs = ConditionSubspaces {
            accent: &acc,
            random: &rnd,
            permuted: &per,
        };
        let accents = self.accents();
        let eval_set = split_of(&utts, Split::Eval);
        let cfg = &self.config.attack;
        let p = self.provenance("attack");
        let mut columns = Vec::new();
        let mut summaries = Vec::new();
        let mut all = Vec::new();
        for condition in Condition::ALL {
            let outcomes =
                attack::run_condition(&model, &eval_set, condition, cfg, cfg.epsilon, &subs)?.into_complete()?;
            let mut jsonl = serde_json::to_string(&serde_json::json!({ "provenance": &p }))?;
            jsonl.push('\n');
            for o in &outcomes {
                jsonl.push_str(&serde_json::to_string(o)?);
                jsonl.push('\n');
            }
            write_file(&self.layout.outcomes(condition), jsonl)?;
            if condition == Condition::Accent {
                for o in &outcomes {
                    write_f32le(&self.layout.attacked_audio(&o.id), &o.adversarial)?;
                }
            }
            let s = report::condition_summary(condition, &outcomes, &accents)?;
            log::info!(
                "{condition}: mean WER {:.3}, disparity {:.1} pp, mean coupling {:.4}",
                s.mean_wer,
                s.disparity_pp,
                s.mean_coupling
            );
            columns.push((report::column_name(condition).to_string(), attack::summarize(&outcomes, &accents)?));
            summaries.push(s);
            all.extend(outcomes);
        }
        write_file(&self.layout.wer_table(), report::wer_table_csv(&columns, Some(&p))?)?;
        write_file(&self.layout.coupling(), report::coupling_csv(&all, Some(&p))?)?;
        self.write_json(
            &self.layout.attack_summary(),
            "attack",
            AttackSummaryRecord {
                epsilon: cfg.epsilon,
                fingerprint: cfg.budget_fingerprint(cfg.epsilon),
                conditions: summaries.clone(),
            },
        )?;
        Ok(summaries)
    }

    pub fn sweep_eps(&self) -> Result<Vec<SweepRow>> {
        let utts = self.corpus()?;
        let model = self.model()?;
        let (acc, rnd, per) = self.subspaces()?;
        let subs = ConditionSubspaces {
            accent: &acc,
            random: &rnd,
            permuted: &per,
        };
        let cfg = &self.config.attack;
        let mut cached = BTreeMap::new();
        for condition in Condition::ALL {
            if self.layout.outcomes(condition).exists() {
                cached.insert(run_key(cfg.epsilon, condition), self.outcomes(condition)?);
            }
        }
        let rows = attack::epsilon_sweep(&model, &split_of(&utts, Split::Eval), &self.accents(), cfg, &subs, &cached)?;
        let p = self.provenance("sweep-eps");
        write_file(&self.layout.eps_sweep_csv(), report::epsilon_sweep_csv(&rows, Some(&p))?)?;
        self.write_json(&self.layout.eps_sweep_json(), "sweep-eps", SweepRecord { rows: rows.clone() })?;
        Ok(rows)
    }

    pub fn intervene(&self) -> Result<InterventionReport> {
        let utts = self.corpus()?;
        let model = self.model()?;
        let (acc, rnd, _) = self.subspaces()?;
        let eval_set = split_of(&utts, Split::Eval);
        let mut attacked = BTreeMap::new();
        for u in &eval_set {
            let path = self.layout.attacked_audio(&u.id);
            require(&path, "attack")?;
            attacked.insert(u.id.clone(), read_f32le(&path)?);
        }
        let accents = self.accents();
        let cfg = &self.config.intervention;
        let r = intervention::evaluate_intervention(&model, &eval_set, &attacked, &acc, cfg, &accents)?;
        let control = intervention::clean_with_hook(&model, &eval_set, &rnd, cfg, &accents)?;
        let p = self.provenance("intervene");
        write_file(&self.layout.intervention_csv(), p.csv_comment() + &r.to_csv()?)?;
        self.write_json(
            &self.layout.intervention_json(),
            "intervene",
            InterventionRecord {
                report: r.clone(),
                random_control_clean: control,
            },
        )?;
        log::info!(
            "intervention alpha {}: clean disparity {:.1} -> {:.1} pp, attacked {:.1} -> {:.1} pp",
            r.alpha,
            r.disparity.clean_base,
            r.disparity.clean_int,
            r.disparity.att_base,
            r.disparity.att_int
        );
        Ok(r)
    }

    pub fn report(&self) -> Result<AuditReport> {
        let training: TrainReport = read_json(&self.layout.train_report(), "train")?;
        let selection: SelectionRecord = read_json(&self.layout.selection(), "extract")?;
        let attack_summary: AttackSummaryRecord = read_json(&self.layout.attack_summary(), "attack")?;
        let sweep: SweepRecord = read_json(&self.layout.eps_sweep_json(), "sweep-eps")?;
        let interv: InterventionRecord = read_json(&self.layout.intervention_json(), "intervene")?;
        let table_path = self.layout.wer_table();
        require(&table_path, "attack")?;
        let table_text =
            fs::read_to_string(&table_path).map_err(|e| Error::io(format!("reading {}", table_path.display()), e))?;
        let wer_table: BTreeMap<String, DisparityRow> = report::read_wer_table(&table_text)?.into_iter().collect();
        let column = |c: Condition| {
            wer_table
                .get(report::column_name(c))
                .ok_or_else(|| Error::Config(format!("WER table lacks `{}`", report::column_name(c))))
        };
        let clean = column(Condition::Clean)?;
        let random = column(Condition::Random)?;
        let (accent_gap_pp, accent_gap_positive) = report::per_accent_gap(column(Condition::Accent)?, random)?;
        let (permuted_gap_pp, permuted_gap_positive) = report::per_accent_gap(column(Condition::Permuted)?, random)?;
        let coupling = |c: Condition| {
            attack_summary
                .conditions
                .iter()
                .find(|s| s.condition == c)
                .map_or(f64::NAN, |s| s.mean_coupling)
        };
        let r = &interv.report;
        let headline = Headline {
            clean_disparity_pp: clean.disparity_pp,
            reference_accent_lowest: clean.strict_minimum() == Some(self.config.corpus.reference_accent().as_str()),
            disparity_pp: wer_table.iter().map(|(k, v)| (k.clone(), v.disparity_pp)).collect(),
            mean_wer: wer_table.iter().map(|(k, v)| (k.clone(), v.mean_wer)).collect(),
            coupling_ratio: coupling(Condition::Accent) / coupling(Condition::Random),
            accent_gap_pp,
            accent_gap_positive,
            permuted_gap_pp,
            permuted_gap_positive,
            sweep_disparity_gap_pp: report::sweep_disparity_gap(&sweep.rows),
            intervention: InterventionSummary {
                alpha: r.alpha,
                clean_mean_change_pp: (r.mean.clean_int - r.mean.clean_base) * 100.0,
                clean_disparity_change_pp: r.clean_disparity_change_pp(),
                attacked_mean_change_pp: (r.mean.att_int - r.mean.att_base) * 100.0,
                attacked_disparity_change_pp: r.attacked_disparity_change_pp(),
                random_control_clean_disparity_change_pp: interv.random_control_clean.disparity_pp
                    - r.disparity.clean_base,
                ood_clean_base: r.ood.clean_base,
                ood_clean_int: r.ood.clean_int,
            },
        };
        let out = AuditReport {
            provenance: self.provenance("report"),
            seeds: self.config.seeds(),
            training,
            subspace: selection.summary,
            conditions: attack_summary.conditions,
            wer_table,
            epsilon_sweep: sweep.rows,
            intervention: interv.report,
            random_control_clean: interv.random_control_clean,
            headline,
        };
        let mut text = serde_json::to_string_pretty(&out)?;
        text.push('\n');
        write_file(&self.layout.report(), text)?;
        Ok(out)
    }

    pub fn full_audit(&self) -> Result<AuditReport> {
        self.gen()?;
        self.train()?;
        self.extract()?;
        self.attack()?;
        self.sweep_eps()?;
        self.intervene()?;
        self.report()
    }

    /// Run one stage by its command name.
    pub fn run_stage(&self, stage: &str) -> Result<()> {
        match stage {
            "gen" => self.gen(),
            "train" => self.train().map(drop),
            "extract" => self.extract().map(drop),
            "attack" => self.attack().map(drop),
            "sweep-eps" => self.sweep_eps().map(drop),
            "intervene" => self.intervene().map(drop),
            "report" => self.report().map(drop),
            "full-audit" => self.full_audit().map(drop),
            other => Err(Error::Config(format!("unknown stage `{other}`"))),
        }
    }
}
