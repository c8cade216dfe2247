use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use akspace_core::acquisition::{
    auc_csv, compare_policies, curves_csv, image_seed, run_simulation, Policy, PolicyKind, StopRule,
};
use akspace_core::data::{generate_phantoms, load_image_dir, read_dataset, write_dataset, Dataset, MaskSamplerConfig};
use akspace_core::evaluation::{
    distribution_csv, evaluator_score_levels, kma_sweep, mse_distribution, quartiles_csv, sweep_csv,
    uncertainty_correlation, uncertainty_csv, Reconstruction,
};
use akspace_core::kspace::SamplingMask;
use akspace_core::models::Model;
use akspace_core::training::{self, validate_model, validation_set, GammaSetting, TrainConfig};
use akspace_core::CoreError;

use crate::settings::{usage, usage_from, KmaGrid, List, Settings};
use crate::{CompareArgs, EvaluateArgs, GenDataArgs, SimulateArgs, TrainArgs};

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Reads a dataset directory and orders it by image id.
fn load_data(dir: &Path) -> Result<Dataset> {
    if !dir.is_dir() {
        return Err(usage(format!("data directory {} not found", dir.display())));
    }
    let mut ds = read_dataset(dir).map_err(|e| match e {
        CoreError::Invalid(_) => usage_from(e),
        other => anyhow::Error::new(other).context(format!("reading {}", dir.display())),
    })?;
    ds.items.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(ds)
}

fn load_model(path: &Path, image_size: usize) -> Result<Model> {
    if !path.is_file() {
        return Err(usage(format!("checkpoint {} not found", path.display())));
    }
    let model = Model::load(path).with_context(|| format!("loading {}", path.display()))?;
    if model.image_size() != image_size {
        return Err(usage(format!(
            "checkpoint expects {0}x{0} images, dataset has {1}x{1}",
            model.image_size(),
            image_size
        )));
    }
    Ok(model)
}

fn image_size(ds: &Dataset) -> usize {
    ds.image_size().expect("read_dataset rejects empty datasets")
}

fn limit(ds: Dataset, n: Option<usize>) -> Result<Dataset> {
    match n {
        Some(0) => Err(usage("--limit must be at least 1")),
        Some(n) if n < ds.len() => Ok(Dataset::new(ds.items[..n].to_vec(), ds.split)?),
        _ => Ok(ds),
    }
}

fn parse_policy(name: &str) -> Result<PolicyKind> {
    PolicyKind::parse(name).map_err(usage_from)
}

fn initial_mask(n: usize, pairs: usize) -> Result<SamplingMask> {
    if pairs == 0 || pairs > n / 2 + 1 {
        return Err(usage(format!("initial pairs must lie in 1..={}", n / 2 + 1)));
    }
    Ok(SamplingMask::from_pairs(n, &(0..pairs).collect::<Vec<_>>())?)
}

pub fn gen_data(args: GenDataArgs, config: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let mut s = Settings::load(config)?;
    let seed = s.seed(seed)?;
    let count = s.get("count", args.count, 256)?;
    let size = s.get("size", args.size, 32)? as usize;
    let images = s.get_opt::<String>("images", args.images.map(|p| p.display().to_string()))?;
    s.check_unused()?;
    if count == 0 {
        return Err(usage("count must be at least 1"));
    }
    if size < 4 || !size.is_power_of_two() {
        return Err(usage(format!("size {size} must be a power of two of at least 4")));
    }
    s.write_echo("gen-data", &args.out)?;
    let ds = match images {
        Some(dir) => {
            let dir = PathBuf::from(dir);
            if !dir.is_dir() {
                return Err(usage(format!("image directory {} not found", dir.display())));
            }
            load_image_dir(&dir, size)?
        }
        None => generate_phantoms(seed, count as usize, size)?,
    };
    write_dataset(&args.out, &ds)?;
    eprintln!("wrote {} images to {}", ds.len(), args.out.display());
    Ok(())
}

pub fn train(args: TrainArgs, config: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let mut s = Settings::load(config)?;
    let mut cfg = TrainConfig::default();
    let keys: Vec<&str> = TrainConfig::KEYS.iter().copied().filter(|k| *k != "seed").collect();
    cfg.apply(&s.take_keys(&keys)).map_err(usage_from)?;
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects key=value, got `{kv}`")))?;
        cfg.set(&k.trim().replace('-', "_"), v).map_err(usage_from)?;
    }
    let flags: [(&str, Option<String>); 11] = [
        ("evaluator_loss", args.evaluator_loss.clone()),
        ("epochs_constant", args.epochs_constant.map(|v| v.to_string())),
        ("epochs_decay", args.epochs_decay.map(|v| v.to_string())),
        ("beta", args.beta.map(|v| v.to_string())),
        ("gamma", args.gamma.clone()),
        ("batch_size", args.batch_size.map(|v| v.to_string())),
        ("cascades", args.cascades.map(|v| v.to_string())),
        ("base_channels", args.base_channels.map(|v| v.to_string())),
        ("evaluator_base_channels", args.evaluator_base_channels.map(|v| v.to_string())),
        ("lr", args.lr.map(|v| v.to_string())),
        ("seed", None),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, &v).map_err(usage_from)?;
        }
    }
    cfg.seed = s.seed(seed)?;
    s.check_unused()?;
    cfg.validate().map_err(usage_from)?;

    let data = load_data(&args.data)?;
    let n = image_size(&data);
    cfg.mask_sampler(n).validate().map_err(usage_from)?;
    let (train_set, val_set) = data.split_train_val(cfg.val_fraction).map_err(usage_from)?;
    for line in cfg.to_text().lines() {
        if let Some((k, v)) = line.split_once('=') {
            if k != "seed" {
                s.record(k, v);
            }
        }
    }
    s.record("data", args.data.display());
    s.write_echo("train", &args.out)?;

    let outcome = training::train(&train_set, &val_set, &cfg, |row| eprintln!("{}", row.csv_row()))?;
    training::write_outcome(&args.out, &outcome)?;

    // final model against zero filling on the validation images at kMA 0.25
    let fixed = cfg.mask_sampler(n).fixed_pairs();
    let val = validation_set(&val_set, 0.25, fixed, cfg.seed ^ 0x5be0_cd19)?;
    let vm = validate_model(&outcome.final_model, &val, cfg.evaluator_loss, outcome.gamma)?;
    let summary = format!(
        "final_val_mse,zero_fill_mse,ratio,val_ssim,best_epoch,gamma\n{},{},{},{},{},{}\n",
        vm.mse,
        vm.zero_fill_mse,
        vm.mse / vm.zero_fill_mse,
        vm.ssim,
        outcome.best_epoch,
        outcome.gamma
    );
    write(&args.out.join("summary.csv"), &summary)?;
    eprintln!(
        "validation MSE {:.4} vs zero-fill {:.4} (ratio {:.3}); gamma {}",
        vm.mse,
        vm.zero_fill_mse,
        vm.mse / vm.zero_fill_mse,
        match cfg.gamma {
            GammaSetting::Auto => format!("{} (auto)", outcome.gamma),
            GammaSetting::Fixed(g) => g.to_string(),
        }
    );
    Ok(())
}

pub fn evaluate(args: EvaluateArgs, config: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let mut s = Settings::load(config)?;
    let seed = s.seed(seed)?;
    let grid = s.get("kma", args.kma, "0.1:0.5:0.05".parse::<KmaGrid>().expect("valid default"))?;
    let boxplot = s.get_bool("boxplot", args.boxplot)?;
    let boxplot_kma = s.get("boxplot_kma", args.boxplot_kma, KmaGrid(vec![0.1, 0.2, 0.25]))?;
    let correlation = s.get_bool("uncertainty_correlation", args.uncertainty_correlation)?;
    let pairs = s.get("pairs", args.pairs, 256)?;
    let kma_min = s.get("kma_min", args.kma_min, 0.1)?;
    let kma_max = s.get("kma_max", args.kma_max, 0.95)?;
    let scores = s.get_bool("scores", args.scores)?;
    let scores_kma = s.get("scores_kma", args.scores_kma, KmaGrid(vec![0.15, 0.25, 0.35, 0.5, 0.7]))?;
    let baseline = s.get_bool("baseline", args.baseline)?;
    let checkpoint = s.get_opt::<String>("checkpoint", args.checkpoint.map(|p| p.display().to_string()))?;
    let data = load_data(&args.data)?;
    let n = image_size(&data);
    let fixed_rows = s.get("fixed_rows", args.fixed_rows, MaskSamplerConfig::for_size(n).fixed_low_freq_rows)?;
    s.check_unused()?;
    if !(kma_min > 0.0 && kma_min <= kma_max && kma_max <= 1.0) {
        return Err(usage(format!("kMA range [{kma_min}, {kma_max}] must lie in (0, 1]")));
    }
    if correlation && pairs < 2 {
        return Err(usage("--pairs must be at least 2"));
    }
    if fixed_rows < 2 || fixed_rows % 2 != 0 || fixed_rows > n {
        return Err(usage(format!("fixed rows must be even and in 2..={n}")));
    }
    let fixed = fixed_rows / 2;
    let model = match &checkpoint {
        Some(p) => Some(load_model(Path::new(p), n)?),
        None => None,
    };
    if model.is_none() && (correlation || scores) {
        return Err(usage("--uncertainty-correlation and --scores need --checkpoint"));
    }
    s.record("data", args.data.display());
    s.write_echo("evaluate", &args.out)?;

    let recon = model.as_ref().map_or(Reconstruction::ZeroFill, Reconstruction::Network);
    let rows = kma_sweep(recon, &data, &grid.0, fixed, seed)?;
    write(&args.out.join("sweep.csv"), &sweep_csv(&rows))?;
    if baseline && model.is_some() {
        let rows = kma_sweep(Reconstruction::ZeroFill, &data, &grid.0, fixed, seed)?;
        write(&args.out.join("sweep_zero_fill.csv"), &sweep_csv(&rows))?;
    }
    if boxplot {
        let levels = mse_distribution(recon, &data, &boxplot_kma.0, fixed, seed ^ 0x1)?;
        write(&args.out.join("mse_distribution.csv"), &distribution_csv(&levels))?;
        write(&args.out.join("mse_quartiles.csv"), &quartiles_csv(&levels))?;
    }
    if let Some(m) = &model {
        if correlation {
            let (points, r) = uncertainty_correlation(m, &data, pairs, kma_min, kma_max, fixed, seed ^ 0x2)?;
            write(&args.out.join("uncertainty.csv"), &uncertainty_csv(&points))?;
            write(&args.out.join("uncertainty_pearson.csv"), &format!("pairs,pearson\n{},{r}\n", points.len()))?;
            eprintln!("Pearson(MSE, mean uncertainty) = {r:.4} over {} pairs", points.len());
        }
        if scores {
            let levels = evaluator_score_levels(m, &data, &scores_kma.0, fixed, seed ^ 0x3)?;
            let mut csv = String::from("kma,mean_unobserved_score,polarization\n");
            for l in &levels {
                csv.push_str(&format!("{},{},{}\n", l.kma, l.mean_unobserved_score, l.polarization));
            }
            write(&args.out.join("evaluator_scores.csv"), &csv)?;
        }
    }
    Ok(())
}

pub fn simulate(args: SimulateArgs, config: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let mut s = Settings::load(config)?;
    let seed = s.seed(seed)?;
    let policy = s.get("policy", args.policy, "eval-greedy".to_string())?;
    let kind = parse_policy(&policy)?;
    let budget = s.get_opt("budget", args.budget)?;
    let threshold = s.get_opt("stop_uncertainty", args.stop_uncertainty)?;
    let frames = s.get_bool("frames", args.frames)?;
    let checkpoint = s.get_opt::<String>("checkpoint", args.checkpoint.map(|p| p.display().to_string()))?;
    let data = load_data(&args.data)?;
    let n = image_size(&data);
    let initial_pairs = s.get("initial_pairs", args.initial_pairs, MaskSamplerConfig::for_size(n).fixed_pairs())?;
    let lim = s.get_opt("limit", args.limit)?;
    s.check_unused()?;
    let data = limit(data, lim)?;
    let mask = initial_mask(n, initial_pairs)?;
    if kind.requires_model() && checkpoint.is_none() {
        return Err(usage(format!("policy {} needs --checkpoint", kind.name())));
    }
    let model = match &checkpoint {
        Some(p) => Some(load_model(Path::new(p), n)?),
        None => None,
    };
    let stop = StopRule {
        budget,
        uncertainty_threshold: threshold,
    };
    let uses_model = kind.requires_model() || (kind == PolicyKind::OracleGreedy && model.is_some());
    stop.validate(uses_model).map_err(usage_from)?;
    s.record("data", args.data.display());
    s.write_echo("simulate", &args.out)?;

    let mut summary = String::from("image_id,steps,final_kma,final_mse,stopped_by_uncertainty\n");
    for (i, it) in data.items.iter().enumerate() {
        let mut policy = Policy::new(kind, image_seed(seed, i));
        let frame_dir = frames.then(|| args.out.join("frames").join(&it.id));
        let trace = run_simulation(&mut policy, model.as_ref(), &it.image, &mask, &stop, frame_dir.as_deref())?;
        write(&args.out.join("traces").join(format!("{}.csv", it.id)), &trace.to_csv())?;
        let last = trace.last();
        summary.push_str(&format!(
            "{},{},{},{},{}\n",
            it.id, last.step, last.kma, last.mse, trace.stopped_by_uncertainty
        ));
    }
    write(&args.out.join("summary.csv"), &summary)?;
    eprintln!("simulated {} images with {}", data.len(), kind.name());
    Ok(())
}

pub fn compare(args: CompareArgs, config: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let mut s = Settings::load(config)?;
    let seed = s.seed(seed)?;
    let all = List(PolicyKind::ALL.iter().map(|k| k.name().to_string()).collect());
    let names = s.get("policies", args.policies, all)?;
    let kinds = names.0.iter().map(|p| parse_policy(p)).collect::<Result<Vec<_>>>()?;
    let budget = s.get_opt("budget", args.budget)?;
    let checkpoint = s.get_opt::<String>("checkpoint", args.checkpoint.map(|p| p.display().to_string()))?;
    let data = load_data(&args.data)?;
    let n = image_size(&data);
    let initial_pairs = s.get("initial_pairs", args.initial_pairs, MaskSamplerConfig::for_size(n).fixed_pairs())?;
    let lim = s.get_opt("limit", args.limit)?;
    s.check_unused()?;
    let data = limit(data, lim)?;
    let mask = initial_mask(n, initial_pairs)?;
    if let Some(k) = kinds.iter().find(|k| k.requires_model()) {
        if checkpoint.is_none() {
            return Err(usage(format!("policy {} needs --checkpoint", k.name())));
        }
    }
    let model = match &checkpoint {
        Some(p) => Some(load_model(Path::new(p), n)?),
        None => None,
    };
    s.record("data", args.data.display());
    s.write_echo("compare-policies", &args.out)?;

    let curves = compare_policies(&kinds, &data, model.as_ref(), &mask, budget, seed)?;
    write(&args.out.join("curves.csv"), &curves_csv(&curves))?;
    write(&args.out.join("auc.csv"), &auc_csv(&curves))?;
    for c in &curves {
        eprintln!("{:<18} AUC {:.5}", c.policy.name(), c.auc_mse);
    }
    Ok(())
}
