use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use sticker_core::data::{
    generate_corpus, generate_split, load_dataset, write_corpus, CorpusManifest, DialogueSample, Split,
};
use sticker_core::evaluator::{ablation_preset, evaluate, run_ablation, MetricsReport};
use sticker_core::model::StickerModel;
use sticker_core::numcore::GradCheckOptions;
use sticker_core::trainer::{load_checkpoint, model_grad_check, save_checkpoint, StepRecord, Trainer};
use sticker_core::{Error, Result};

use crate::config::RunConfig;
use crate::manifest::{create_dir, write_file, RunManifest};
use crate::{AblateArgs, EvalArgs, GradcheckArgs, SplitArg, TrainArgs};

pub struct Run {
    pub cfg: RunConfig,
    pub out: Option<PathBuf>,
    pub threads: usize,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn pct(x: f64) -> String {
    format!("{:.1}", 100.0 * x)
}

fn metrics_table(rows: &[(String, MetricsReport)], n_candidates: usize) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(6);
    let mut s = format!(
        "{:<width$}  {:>6}  {:>6}  {:>6}  {:>6}  {:>6}\n",
        "",
        "MAP",
        format!("R{n_candidates}@1"),
        format!("R{n_candidates}@2"),
        format!("R{n_candidates}@5"),
        "n"
    );
    for (name, r) in rows {
        s.push_str(&format!(
            "{name:<width$}  {:>6}  {:>6}  {:>6}  {:>6}  {:>6}\n",
            pct(r.map),
            pct(r.r_at_1),
            pct(r.r_at_2),
            pct(r.r_at_5),
            r.n_samples
        ));
    }
    s
}

impl Run {
    fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| self.cfg.paths.run_dir.clone())
    }

    /// Adopts the generator settings recorded with the corpus in `dir`, so
    /// the model geometry always matches the data.
    fn use_corpus(&mut self, dir: &Path) -> Result<()> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        let m: CorpusManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        m.config.validate()?;
        self.cfg.data = m.config;
        Ok(())
    }

    fn load_split(&self, dir: &Path, split: Split, manifest: &mut RunManifest) -> Result<Vec<DialogueSample>> {
        let path = dir.join(split.file_name());
        let data = load_dataset(&path)?;
        manifest.input(&path)?;
        Ok(data)
    }

    pub fn gen_data(self) -> Result<bool> {
        let dir = self.out.clone().unwrap_or_else(|| self.cfg.paths.data_dir.clone());
        let corpus = generate_corpus(&self.cfg.data)?;
        let written = write_corpus(&corpus, &self.cfg.data, &dir)?;
        let mut manifest = RunManifest::new("gen-data", &self.cfg, self.threads);
        for (name, n, _) in &written.files {
            println!("{name}\t{n}");
            manifest.output(&dir.join(name))?;
        }
        manifest.output(&dir.join("manifest.json"))?;
        manifest.write(&dir)?;
        Ok(true)
    }

    pub fn train(mut self, args: &TrainArgs) -> Result<bool> {
        let data_dir = args.data.clone().unwrap_or_else(|| self.cfg.paths.data_dir.clone());
        self.use_corpus(&data_dir)?;
        let out = self.out_dir();
        create_dir(&out)?;
        let ckpt = match &args.resume {
            Some(path) => {
                let c = load_checkpoint(path)?;
                self.cfg.encoder = c.model.encoder.clone();
                self.cfg.alignment = c.model.alignment.clone();
                self.cfg.fusion = c.model.fusion.clone();
                self.cfg.ablation = c.model.ablation;
                self.cfg.train = sticker_core::trainer::TrainConfig {
                    epochs: self.cfg.train.epochs,
                    max_steps: self.cfg.train.max_steps,
                    ..c.train.clone()
                };
                Some(c)
            }
            None => None,
        };
        self.cfg.validate()?;
        let mut manifest = RunManifest::new("train", &self.cfg, self.threads);
        if let Some(path) = &args.resume {
            manifest.input(path)?;
        }
        let train = self.load_split(&data_dir, Split::Train, &mut manifest)?;
        let val = self.load_split(&data_dir, Split::Val, &mut manifest)?;
        let (model, store) = StickerModel::new(self.cfg.model(), self.cfg.train.seed)?;
        let mut trainer = match ckpt {
            Some(c) => Trainer::resume(&model, c, self.cfg.train.clone(), &train, &val)?,
            None => Trainer::new(&model, store, self.cfg.train.clone(), &train, &val)?,
        };

        let steps_path = out.join("steps.tsv");
        let appending = args.resume.is_some() && steps_path.exists();
        let mut log = OpenOptions::new()
            .create(true)
            .write(true)
            .append(appending)
            .truncate(!appending)
            .open(&steps_path)
            .map_err(|e| io_err(&steps_path, e))?;
        if !appending {
            writeln!(log, "{}", StepRecord::TSV_HEADER).map_err(|e| io_err(&steps_path, e))?;
        }
        let ckpt_path = out.join("checkpoint.json");
        let mut epochs_seen = trainer.state().epochs.len();
        trainer.run_with(|t, r| {
            writeln!(log, "{}", r.tsv()).map_err(|e| io_err(&steps_path, e))?;
            let epochs = &t.state().epochs;
            if epochs.len() > epochs_seen {
                epochs_seen = epochs.len();
                let e = epochs.last().expect("nonempty");
                let val = e.val.map_or("-".to_string(), |v| pct(v.map));
                println!("epoch {}\tsteps {}\tloss {:.4}\tval MAP {val}", e.epoch, e.steps, e.mean_loss);
                save_checkpoint(&ckpt_path, &t.checkpoint())?;
            }
            Ok(())
        })?;
        drop(log);
        save_checkpoint(&ckpt_path, &trainer.checkpoint())?;
        println!("step {}\tcheckpoint {}", trainer.state().step, ckpt_path.display());
        manifest.output(&ckpt_path)?;
        manifest.output(&steps_path)?;
        manifest.write(&out)?;
        Ok(true)
    }

    pub fn eval(mut self, args: &EvalArgs) -> Result<bool> {
        let data_dir = args.data.clone().unwrap_or_else(|| self.cfg.paths.data_dir.clone());
        self.use_corpus(&data_dir)?;
        let ckpt = match &args.checkpoint {
            Some(path) => {
                if !path.is_file() {
                    return Err(Error::Io {
                        path: path.clone(),
                        source: std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found"),
                    });
                }
                Some(load_checkpoint(path)?)
            }
            None => None,
        };
        if let Some(c) = &ckpt {
            self.cfg.encoder = c.model.encoder.clone();
            self.cfg.alignment = c.model.alignment.clone();
            self.cfg.fusion = c.model.fusion.clone();
            self.cfg.ablation = c.model.ablation;
            self.cfg.train = c.train.clone();
        }
        self.cfg.validate()?;
        let mut manifest = RunManifest::new("eval", &self.cfg, self.threads);
        if let Some(path) = &args.checkpoint {
            manifest.input(path)?;
        }
        let split = Split::from(args.split);
        let samples = self.load_split(&data_dir, split, &mut manifest)?;
        let (model, fresh) = StickerModel::new(self.cfg.model(), self.cfg.train.seed)?;
        let params = match &ckpt {
            Some(c) => c.state.best_params.as_ref().unwrap_or(&c.state.params),
            None => &fresh,
        };
        let (report, _) = evaluate(&model, params, &samples)?;
        let label = format!("{split:?}").to_lowercase();
        print!("{}", metrics_table(&[(label, report)], self.cfg.data.n_candidates));

        let out = self.out_dir();
        create_dir(&out)?;
        let path = out.join("metrics.json");
        write_file(&path, serde_json::to_string_pretty(&report).expect("report serializes").as_bytes())?;
        manifest.output(&path)?;
        manifest.write(&out)?;
        Ok(true)
    }

    pub fn gradcheck(mut self, args: &GradcheckArgs) -> Result<bool> {
        if args.batch == 0 {
            return Err(Error::Config("--batch must be >= 1".into()));
        }
        if !(args.tol > 0.0) {
            return Err(Error::Config("--tol must be > 0".into()));
        }
        self.cfg.encoder.d_model = args.dim;
        self.cfg.validate()?;
        let data = generate_split(&self.cfg.data, 0..args.batch as u64)?;
        let (model, store) = StickerModel::new(self.cfg.model(), self.cfg.train.seed)?;
        let batch: Vec<&DialogueSample> = data.iter().collect();
        let opts = GradCheckOptions {
            max_coords_per_param: (args.coords > 0).then_some(args.coords),
            seed: self.cfg.train.seed,
            ..Default::default()
        };
        let report = model_grad_check(&model, &store, &batch, self.cfg.train.w_knowledge, self.cfg.train.seed, &opts)?;
        let mut text = String::from("param\tcoords\trel_err\n");
        for p in &report.params {
            text.push_str(&format!("{}\t{}\t{:.3e}\n", p.name, p.coords_checked, p.rel_error));
        }
        let passed = report.passed(args.tol);
        println!(
            "max rel err {:.3e} over {} tensors (tol {:e}): {}",
            report.max_rel_error,
            report.params.len(),
            args.tol,
            if passed { "PASS" } else { "FAIL" }
        );
        if !report.deterministic {
            println!("loss evaluations were not deterministic");
        }
        if let Some(dir) = &self.out {
            create_dir(dir)?;
            let path = dir.join("gradcheck.tsv");
            write_file(&path, text.as_bytes())?;
            let mut manifest = RunManifest::new("gradcheck", &self.cfg, self.threads);
            manifest.output(&path)?;
            manifest.write(dir)?;
        }
        Ok(passed)
    }

    pub fn ablate(mut self, args: &AblateArgs) -> Result<bool> {
        let data_dir = args.data.clone().unwrap_or_else(|| self.cfg.paths.data_dir.clone());
        self.use_corpus(&data_dir)?;
        self.cfg.validate()?;
        let configs = ablation_preset(&args.preset)?;
        let mut manifest = RunManifest::new("ablate", &self.cfg, self.threads);
        let train = self.load_split(&data_dir, Split::Train, &mut manifest)?;
        let val = self.load_split(&data_dir, Split::Val, &mut manifest)?;
        let test = self.load_split(&data_dir, Split::Test, &mut manifest)?;
        let base = self.cfg.model();
        let mut records = Vec::new();
        for &seed in &args.seeds {
            let tc = sticker_core::trainer::TrainConfig {
                seed,
                ..self.cfg.train.clone()
            };
            let recs = run_ablation(&configs, &base, &tc, &train, &val, &test)?;
            let rows: Vec<_> = recs.iter().map(|r| (r.name.clone(), r.report)).collect();
            println!("seed {seed}");
            print!("{}", metrics_table(&rows, self.cfg.data.n_candidates));
            records.extend(recs);
        }
        let out = self.out_dir();
        create_dir(&out)?;
        let path = out.join("ablation.json");
        write_file(&path, serde_json::to_string_pretty(&records).expect("records serialize").as_bytes())?;
        manifest.output(&path)?;
        manifest.write(&out)?;
        Ok(true)
    }
}
