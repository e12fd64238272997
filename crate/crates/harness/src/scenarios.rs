use std::fs;
use std::path::{Path, PathBuf};

use exlab_core::augment::{GridImage, ViewPolicy};
use exlab_core::defense::active::{poison, NoiseConfig, PoisonConfig};
use exlab_core::defense::detect::{best_total_error, calibrate, evaluate_rates, make_eval_pairs, DetectorConfig, Space};
use exlab_core::defense::reactive::{
    di_scores, di_scores_with, di_test, rep_distance, verify_watermark, watermark_success_rate, OwnershipTest, VerdictRecord,
};
use exlab_core::extraction::{steal_direct, ApiClient, RepresentationApi, StolenModel};
use exlab_core::linear_eval::{probe_accuracy, train_probe_on_features};
use exlab_core::nn::{load_checkpoint, save_checkpoint, Architecture, Network, Tensor};
use exlab_core::pow::{solve, verify, DifficultyPolicy, PuzzleIssuer};
use exlab_core::rng::{seeded, streams};
use exlab_core::synthdata::{generate, make_query_pool, DatasetSplits, DatasetSpec};
use exlab_core::victim::{
    train_supervised, train_victim, train_victim_watermarked, DefenseStep, ServeConfig, VictimConfig, VictimModel, VictimServer,
};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Scenario};
use crate::error::{Context, HarnessError, Result};
use crate::results::{write_json_lines, write_rows, ResultRow};

const POISON_STREAM: u64 = 60;

/// Everything a finished run wrote.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub config_hash: String,
    pub dir: PathBuf,
    pub rows: Vec<ResultRow>,
    pub verdicts: Vec<serde_json::Value>,
}

#[derive(Debug, Default, Clone)]
struct Meta {
    budget: Option<usize>,
    loss: Option<String>,
    defense: Option<String>,
    setting: Option<String>,
}

impl Meta {
    fn setting(s: impl Into<String>) -> Self {
        Meta { setting: Some(s.into()), ..Default::default() }
    }
}

struct Run<'a> {
    cfg: &'a ExperimentConfig,
    name: &'static str,
    hash: String,
    dir: PathBuf,
    rows: Vec<ResultRow>,
    verdicts: Vec<serde_json::Value>,
}

impl Run<'_> {
    fn push(&mut self, metric: &str, value: f64, meta: &Meta) {
        self.rows.push(ResultRow {
            config_hash: self.hash.clone(),
            scenario: self.name.to_string(),
            metric: metric.to_string(),
            value,
            budget: meta.budget,
            loss: meta.loss.clone(),
            defense: meta.defense.clone(),
            setting: meta.setting.clone(),
        });
    }

    fn verdict(&mut self, subject: &str, record: VerdictRecord) {
        let mut v = serde_json::to_value(record).expect("verdict serializes");
        let obj = v.as_object_mut().expect("verdict is an object");
        obj.insert("config_hash".into(), self.hash.clone().into());
        obj.insert("scenario".into(), self.name.into());
        obj.insert("subject".into(), subject.into());
        self.verdicts.push(v);
    }

    fn checkpoint_dir(&self) -> Result<PathBuf> {
        let d = self.dir.join("checkpoints");
        fs::create_dir_all(&d)?;
        Ok(d)
    }
}

struct World {
    data: DatasetSplits,
    victim: VictimModel,
    victim_accuracy: f64,
}

#[derive(Serialize, Deserialize)]
struct VictimMeta {
    data: DatasetSpec,
    config: VictimConfig,
    epoch_losses: Vec<f64>,
}

const ENCODER_FILE: &str = "encoder.exlb";
const HEAD_FILE: &str = "head.exlb";
const PREDICTOR_FILE: &str = "predictor.exlb";
const META_FILE: &str = "victim.json";

/// Writes a victim as three network checkpoints plus a JSON sidecar.
pub fn save_victim(dir: &Path, victim: &VictimModel, data: &DatasetSpec) -> Result<()> {
    fs::create_dir_all(dir)?;
    let s = "train_victim";
    save_checkpoint(&victim.encoder, dir.join(ENCODER_FILE)).ctx(s)?;
    save_checkpoint(&victim.head, dir.join(HEAD_FILE)).ctx(s)?;
    let pred_path = dir.join(PREDICTOR_FILE);
    match &victim.aug_predictor {
        Some(p) => save_checkpoint(p, &pred_path).ctx(s)?,
        None if pred_path.exists() => fs::remove_file(&pred_path)?,
        None => {}
    }
    let meta = VictimMeta { data: data.clone(), config: victim.config.clone(), epoch_losses: victim.epoch_losses.clone() };
    fs::write(dir.join(META_FILE), serde_json::to_string_pretty(&meta).expect("meta serializes"))?;
    Ok(())
}

fn require(path: PathBuf, what: &str) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(HarnessError::MissingFile { what: what.to_string(), path })
    }
}

/// Loads a victim written by [`save_victim`]; the data spec must match.
pub fn load_victim(dir: &Path, expected_data: &DatasetSpec) -> Result<VictimModel> {
    let s = "load_victim";
    let meta_path = require(dir.join(META_FILE), "victim checkpoint metadata")?;
    let meta: VictimMeta = serde_json::from_str(&fs::read_to_string(&meta_path)?)
        .map_err(|e| HarnessError::config("victim_checkpoint", format!("{}: {e}", meta_path.display())))?;
    if &meta.data != expected_data {
        return Err(HarnessError::config(
            "data",
            format!("victim at {} was trained on a different data spec (check `seed` and [data])", dir.display()),
        ));
    }
    let encoder = load_checkpoint(require(dir.join(ENCODER_FILE), "victim encoder checkpoint")?).ctx(s)?;
    let head = load_checkpoint(require(dir.join(HEAD_FILE), "victim head checkpoint")?).ctx(s)?;
    let pred_path = dir.join(PREDICTOR_FILE);
    let aug_predictor = if pred_path.is_file() { Some(load_checkpoint(pred_path).ctx(s)?) } else { None };
    Ok(VictimModel { encoder, head, aug_predictor, config: meta.config, epoch_losses: meta.epoch_losses })
}

fn defense_label(serve: &ServeConfig) -> String {
    if serve.defenses.is_empty() {
        return "none".into();
    }
    serve
        .defenses
        .iter()
        .map(|d| match d {
            DefenseStep::Noise(n) => format!("noise(mean={},sigma={})", n.mean, n.sigma),
            DefenseStep::SimilarityPerturb { detector, .. } => format!("similarity(tau={})", detector.threshold),
            DefenseStep::PowGate { policy } => format!("pow(base={},cap={})", policy.base_bits, policy.cap_bits),
        })
        .collect::<Vec<_>>()
        .join("+")
}

fn build_world(run: &mut Run, train: bool) -> Result<World> {
    let cfg = run.cfg;
    let s = run.name;
    let data = generate(&cfg.data).ctx(s)?;
    let victim = if train {
        let v = if cfg.watermark_victim {
            train_victim_watermarked(&data.train, &cfg.victim).ctx(s)?
        } else {
            train_victim(&data.train, &cfg.victim).ctx(s)?
        };
        save_victim(&run.checkpoint_dir()?.join("victim"), &v, &cfg.data)?;
        v
    } else {
        let dir = cfg.victim_checkpoint.as_ref().expect("validated");
        load_victim(dir, &cfg.data)?
    };
    let victim_accuracy = probe_accuracy(&victim.encoder, &data.train, &data.test, &cfg.probe).ctx(s)?;
    if train {
        let last = victim.epoch_losses.last().copied().unwrap_or(f64::NAN);
        run.push("victim_final_loss", last, &Meta::default());
        run.push("victim_probe_accuracy", victim_accuracy, &Meta::default());
        if let Some(pred) = &victim.aug_predictor {
            let rate = watermark_success_rate(&victim.encoder, pred, &data.test.images, 500, &mut seeded(cfg.seed, streams::EVAL))
                .ctx(s)?;
            run.push("watermark_own_rate", rate, &Meta::default());
        }
    }
    Ok(World { data, victim, victim_accuracy })
}

fn served_features(api: &mut ApiClient, images: &[GridImage]) -> exlab_core::Result<Tensor> {
    let rows = images.iter().map(|img| api.query(img)).collect::<exlab_core::Result<Vec<_>>>()?;
    Tensor::from_rows(&rows)
}

fn steal(run: &mut Run, w: &World, serve: &ServeConfig, tag: &str) -> Result<StolenModel> {
    let cfg = run.cfg;
    let s = run.name;
    let server = VictimServer::new(w.victim.clone(), serve.clone()).ctx(s)?;
    let pool = make_query_pool(&cfg.data, &w.data, cfg.pool.mode, cfg.pool.size, cfg.seed).ctx(s)?;
    let mut api = ApiClient::new(&server, "attacker");
    let stolen = steal_direct(&mut api, &pool, &cfg.attack).ctx(s)?;
    let meta = Meta {
        budget: Some(cfg.attack.budget),
        loss: Some(cfg.attack.loss.name().to_string()),
        defense: Some(defense_label(serve)),
        setting: None,
    };
    let acc = probe_accuracy(&stolen.encoder, &w.data.train, &w.data.test, &cfg.probe).ctx(s)?;
    run.push("victim_probe_accuracy", w.victim_accuracy, &meta);
    run.push("stolen_probe_accuracy", acc, &meta);
    run.push("queries_spent", stolen.queries_spent as f64, &meta);
    if let Some(&l) = stolen.epoch_losses.last() {
        run.push("attack_final_loss", l, &meta);
    }
    if stolen.encoder.output_dim() == w.victim.encoder.output_dim() {
        let d = rep_distance(&w.victim.encoder, &stolen.encoder, &w.data.train.images).ctx(s)?;
        run.push("rep_distance", d, &meta);
    }
    if api.pow_attempts() > 0 {
        run.push("attacker_pow_attempts", api.pow_attempts() as f64, &meta);
    }
    if !serve.defenses.is_empty() {
        let mut legit = ApiClient::new(&server, "legit");
        let train = served_features(&mut legit, &w.data.train.images).ctx(s)?;
        let test = served_features(&mut legit, &w.data.test.images).ctx(s)?;
        let probe = train_probe_on_features(&train, &w.data.train.labels, w.data.train.n_classes, &cfg.probe).ctx(s)?;
        run.push("legit_probe_accuracy", probe.accuracy(&test, &w.data.test.labels).ctx(s)?, &meta);
    }
    save_checkpoint(&stolen.encoder, run.checkpoint_dir()?.join(format!("stolen_{tag}.exlb"))).ctx(s)?;
    Ok(stolen)
}

fn linear_eval(run: &mut Run) -> Result<()> {
    let cfg = run.cfg;
    let s = run.name;
    let data = generate(&cfg.data).ctx(s)?;
    let encoder = match (&cfg.encoder_checkpoint, &cfg.victim_checkpoint) {
        (Some(p), _) => load_checkpoint(require(p.clone(), "encoder checkpoint")?).ctx(s)?,
        (None, Some(dir)) => load_victim(dir, &cfg.data)?.encoder,
        (None, None) => unreachable!("validated"),
    };
    let acc = probe_accuracy(&encoder, &data.train, &data.test, &cfg.probe).ctx(s)?;
    run.push("probe_accuracy", acc, &Meta::default());
    Ok(())
}

fn detect(run: &mut Run, w: &World) -> Result<()> {
    let cfg = run.cfg;
    let s = run.name;
    let d = &cfg.detect;
    let n = d.images.min(w.data.test.len());
    let mut rng = seeded(cfg.seed, streams::EVAL);
    let pairs = make_eval_pairs(&w.data.test.images[..n], &w.victim.config.policy, &mut rng).ctx(s)?;
    let (det, setting) = match d.threshold {
        Some(t) => (DetectorConfig { metric: d.metric, threshold: t, space: d.space }, format!("tau={t}")),
        None => {
            let c = calibrate(&w.victim, d.metric, d.space, &pairs, d.max_fpr).ctx(s)?;
            (c, format!("calibrated(max_fpr={})", d.max_fpr))
        }
    };
    let rates = evaluate_rates(&w.victim, &det, &pairs).ctx(s)?;
    let meta = Meta::setting(setting);
    run.push("threshold", det.threshold, &meta);
    run.push("fpr", rates.fpr, &meta);
    run.push("fnr", rates.fnr, &meta);
    for (space, label) in [(Space::Projection, "projection"), (Space::Representation, "representation")] {
        let (best, _) = best_total_error(&w.victim, d.metric, space, &pairs).ctx(s)?;
        run.push("best_total_error", best, &Meta::setting(format!("space={label}")));
    }
    Ok(())
}

fn ownership_rows(run: &mut Run, test: &str, subject: &str, rate: Option<f64>, t: &OwnershipTest) {
    let meta = Meta::setting(format!("subject={subject}"));
    if let Some(r) = rate {
        run.push(&format!("{test}_rate"), r, &meta);
    }
    run.push(&format!("{test}_t"), t.ttest.t, &meta);
    run.push(&format!("{test}_p"), t.ttest.p, &meta);
    run.verdict(subject, VerdictRecord::new(test, &t.ttest, t.claim));
}

fn watermark(run: &mut Run, w: &World, stolen: Option<&StolenModel>) -> Result<()> {
    let cfg = run.cfg;
    let s = run.name;
    let pred = w.victim.aug_predictor.as_ref().ok_or_else(|| {
        HarnessError::config("victim_checkpoint", "victim has no augmentation predictor; train it with watermark_victim = true")
    })?;
    let owned;
    let stolen = match stolen {
        Some(m) => m,
        None => {
            owned = steal(run, w, &cfg.serve, "watermark")?;
            &owned
        }
    };
    let genuine_cfg = VictimConfig { seed: cfg.seed + cfg.watermark.genuine_seed_offset, ..cfg.victim.clone() };
    let genuine = train_victim(&w.data.train, &genuine_cfg).ctx(s)?;
    let adapter_images = &w.data.test.images[..];
    for (subject, enc) in [("stolen", &stolen.encoder), ("genuine", &genuine.encoder)] {
        let mut rng = seeded(cfg.seed, streams::EVAL);
        let v = verify_watermark(
            enc,
            pred,
            &w.data.train.images,
            Some((&w.victim.encoder, adapter_images)),
            &cfg.watermark.check,
            &mut rng,
        )
        .ctx(s)?;
        let t = OwnershipTest { ttest: v.ttest, claim: v.claim };
        ownership_rows(run, "watermark", subject, Some(v.success_rate), &t);
    }
    Ok(())
}

fn dataset_inference(run: &mut Run, w: &World) -> Result<()> {
    let cfg = run.cfg;
    let s = run.name;
    let n = cfg.di.points.min(w.data.train.len()).min(w.data.test.len());
    let (private, public) = (&w.data.train.images[..n], &w.data.test.images[..n]);
    let policy = ViewPolicy::label_preserving();
    let k = cfg.di.n_aug;
    let rng = || seeded(cfg.seed, streams::EVAL);

    let ssl = di_scores(&w.victim.encoder, &w.victim.head, private, public, k, &policy, &mut rng()).ctx(s)?;
    ownership_rows(run, "dataset_inference", "ssl_victim", None, &di_test(&ssl).ctx(s)?);

    let sl = train_supervised(&w.data.train, &cfg.di.supervised).ctx(s)?;
    let identity = Network::identity(sl.body.output_dim());
    let pen = di_scores(&sl.body, &identity, private, public, k, &policy, &mut rng()).ctx(s)?;
    ownership_rows(run, "dataset_inference", "supervised_penultimate", None, &di_test(&pen).ctx(s)?);
    let embed = |imgs: &[GridImage]| sl.probabilities(imgs);
    let prob = di_scores_with(&embed, private, public, k, &policy, &mut rng()).ctx(s)?;
    ownership_rows(run, "dataset_inference", "supervised_softmax", None, &di_test(&prob).ctx(s)?);
    Ok(())
}

fn poison_demo(run: &mut Run) -> Result<()> {
    let cfg = run.cfg;
    let s = run.name;
    let p = &cfg.poison;
    let mut rng = seeded(cfg.seed, POISON_STREAM);
    let (mut ab, mut cd, mut radius, mut kept) = (0.0, 0.0, 0.0f64, 0usize);
    for _ in 0..p.instances {
        let f = Network::new(&Architecture::mlp(&[16, 16, 8]), &mut rng).ctx(s)?;
        let g = Network::new(&Architecture::mlp(&[8, 4]), &mut rng).ctx(s)?;
        let x: Vec<f64> = (0..16).map(|_| rng.random::<f64>()).collect();
        let fx = f.predict_one(&x).ctx(s)?;
        let y_v: Vec<f64> = fx.iter().map(|v| v + 0.3 * (rng.random::<f64>() - 0.5)).collect();
        let pc = PoisonConfig { beta: p.beta, steps: p.steps, ..PoisonConfig::new(f, g, p.target, p.epsilon) };
        let out = poison(&y_v, &x, &pc).ctx(s)?;
        ab += out.sim_ab;
        cd += out.sim_cd;
        radius = radius.max(out.radii.last().copied().unwrap_or(0.0));
        kept += (out.sim_cd >= out.sim_ab) as usize;
    }
    let n = p.instances as f64;
    let meta = Meta::setting(format!("eps={}", p.epsilon));
    run.push("sim_attacker_mean", ab / n, &meta);
    run.push("sim_legit_mean", cd / n, &meta);
    run.push("legit_ge_attacker_fraction", kept as f64 / n, &meta);
    run.push("max_radius", radius, &meta);
    Ok(())
}

fn pow_demo(run: &mut Run) -> Result<()> {
    let cfg = run.cfg;
    let s = run.name;
    let issuer = PuzzleIssuer::new(cfg.seed);
    for &bits in &cfg.pow.difficulties {
        let policy = DifficultyPolicy { base_bits: bits, increment_bits_per_flag: 0, cap_bits: bits };
        let (mut total, mut ok) = (0u64, 0usize);
        for i in 0..cfg.pow.trials {
            let puzzle = issuer.make_puzzle("demo", i as u64, &policy, 0);
            let sol = solve(&puzzle, 1 << 30).ctx(s)?;
            total += sol.attempts;
            ok += verify(&puzzle, &sol.suffix) as usize;
        }
        let meta = Meta::setting(format!("bits={bits}"));
        run.push("mean_attempts", total as f64 / cfg.pow.trials as f64, &meta);
        run.push("expected_attempts", 2f64.powi(bits as i32), &meta);
        run.push("verified_fraction", ok as f64 / cfg.pow.trials as f64, &meta);
    }
    Ok(())
}

fn full_pipeline(run: &mut Run) -> Result<()> {
    let w = build_world(run, true)?;
    let serve = run.cfg.serve.clone();
    let stolen = steal(run, &w, &serve, "clean")?;
    let noisy = ServeConfig {
        defenses: vec![DefenseStep::Noise(NoiseConfig { mean: 10.0, sigma: 1.0 })],
        ..serve
    };
    steal(run, &w, &noisy, "noisy")?;
    detect(run, &w)?;
    if w.victim.aug_predictor.is_some() {
        watermark(run, &w, Some(&stolen))?;
    }
    dataset_inference(run, &w)?;
    poison_demo(run)?;
    pow_demo(run)
}

/// Runs one experiment and writes `results.csv`, `verdicts.jsonl`,
/// `config.json` and any checkpoints under [`ExperimentConfig::run_dir`].
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let cfg = cfg.clone().resolve()?;
    let dir = cfg.run_dir();
    fs::create_dir_all(&dir)?;
    let mut r = Run { cfg: &cfg, name: cfg.scenario.name(), hash: cfg.hash(), dir: dir.clone(), rows: vec![], verdicts: vec![] };
    match cfg.scenario {
        Scenario::TrainVictim => {
            build_world(&mut r, true)?;
        }
        Scenario::Steal => {
            let w = build_world(&mut r, false)?;
            steal(&mut r, &w, &cfg.serve, "direct")?;
        }
        Scenario::LinearEval => linear_eval(&mut r)?,
        Scenario::DetectCalibrate => {
            let w = build_world(&mut r, false)?;
            detect(&mut r, &w)?;
        }
        Scenario::WatermarkVerify => {
            let w = build_world(&mut r, false)?;
            watermark(&mut r, &w, None)?;
        }
        Scenario::DatasetInference => {
            let w = build_world(&mut r, false)?;
            dataset_inference(&mut r, &w)?;
        }
        Scenario::PoisonDemo => poison_demo(&mut r)?,
        Scenario::PowDemo => pow_demo(&mut r)?,
        Scenario::FullPipeline => full_pipeline(&mut r)?,
    }
    let mut resolved = serde_json::to_string_pretty(&cfg).expect("config serializes");
    resolved.push('\n');
    fs::write(dir.join("config.json"), resolved)?;
    write_rows(&dir.join("results.csv"), &r.rows)?;
    write_json_lines(&dir.join("verdicts.jsonl"), &r.verdicts)?;
    Ok(RunOutput { config_hash: r.hash, dir, rows: r.rows, verdicts: r.verdicts })
}
