use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde_json::json;
use skyalign::config::{Config, DataSource};
use skyalign::dataset::{generate_toy_dataset, Dataset, View};
use skyalign::experiment::{load_eval, load_train, median, run, RunSummary};
use skyalign::retrieval::{evaluate, DescriptorExtractor, Evaluation, MetricsReport, OracleExtractor, Protocol};
use skyalign::training::checkpoint::load_model;
use skyalign::training::{train as run_training, TrainLog, TrainOptions, Variant, LOG_FILE};
use skyalign::{Error, Result};

use crate::plot::{bar_chart, line_chart, Series};
use crate::Common;

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.txt";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_RUNS_CSV: &str = "ablation_runs.csv";
pub const METRICS_JSON: &str = "metrics.json";
const ORACLE_DIM: usize = 64;

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Resolved config, seed and version: enough to rerun the command exactly
/// with `--config <out>/config.txt`.
fn write_manifest(out: &Path, command: &str, config: &Config, extra: serde_json::Value) -> Result<()> {
    ensure_dir(out)?;
    write(&out.join(CONFIG_FILE), config.to_text())?;
    let manifest = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": config.seed,
        "config_hash": config.hash(),
        "config_file": CONFIG_FILE,
        "config": config.to_text().lines().collect::<Vec<_>>(),
        "extra": extra,
    });
    write(&out.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")
}

pub fn train(common: &Common, resume: Option<&Path>) -> Result<()> {
    let config = common.build_config(None)?;
    let out = &common.out;
    write_manifest(out, "train", &config, json!({ "resume": resume.map(|p| p.display().to_string()) }))?;
    let (data, report) = load_train(&config)?;
    if let Some(r) = report {
        r.write_json(&out.join("load_report.json"))?;
    }
    info!("training {} on {} images, {} locations", config.schedule.variant, data.len(), data.num_locations);
    let opts = TrainOptions { out_dir: Some(out.clone()), resume: resume.map(Path::to_path_buf) };
    let outcome = run_training(&config, &data, &opts)?;
    training_plots(out, &outcome.log)?;
    if let Some(p) = &outcome.final_checkpoint {
        println!("checkpoint: {}", p.display());
    }
    Ok(())
}

fn training_plots(out: &Path, log: &TrainLog) -> Result<()> {
    let means = log.epoch_means();
    let names = ["location", "view", "adversarial", "combined"];
    let losses: Vec<Series> = names
        .iter()
        .enumerate()
        .map(|(i, n)| Series { name: n.to_string(), points: means.iter().map(|(e, m)| (*e as f64, m[i])).collect() })
        .collect();
    write(&out.join("losses.svg"), line_chart("Mean per-sample loss by epoch", "epoch", "loss", &losses))?;

    // one point per epoch, taken from its first step
    let mut firsts = BTreeMap::new();
    for row in &log.rows {
        firsts.entry(row.epoch).or_insert(row);
    }
    let alpha = vec![Series {
        name: "alpha".into(),
        points: firsts.iter().map(|(e, r)| (*e as f64, r.report.alpha)).collect(),
    }];
    write(&out.join("alpha.svg"), line_chart("Adversarial weight", "epoch", "alpha", &alpha))?;
    let groups = ["backbone", "encoder_rest", "classifier", "discriminator"];
    let lrs: Vec<Series> = groups
        .iter()
        .enumerate()
        .map(|(i, g)| Series { name: g.to_string(), points: firsts.iter().map(|(e, r)| (*e as f64, r.lrs[i])).collect() })
        .collect();
    write(&out.join("lr.svg"), line_chart("Learning rate per parameter group", "epoch", "lr", &lrs))
}

fn recall_chart(reports: &[MetricsReport]) -> String {
    let cats: Vec<String> = ["R@1", "R@5", "R@10", "AP"].iter().map(|s| s.to_string()).collect();
    let groups: Vec<(String, Vec<f64>)> =
        reports.iter().map(|m| (m.protocol.to_string(), vec![m.r1, m.r5, m.r10, m.ap])).collect();
    bar_chart("Retrieval metrics", &cats, &groups)
}

pub fn eval(common: &Common, checkpoint: Option<&Path>, protocols: &[Protocol], oracle: bool, top_k: usize) -> Result<()> {
    let loaded = match checkpoint {
        Some(path) if !oracle => Some(load_model(path)?),
        _ => None,
    };
    let base = loaded.as_ref().map(|(_, c, _)| c.clone());
    let config = common.build_config(base)?;
    if let Some((model, _, ckpt)) = &loaded {
        if ckpt.meta.config_hash != config.hash() {
            warn!("evaluation config differs from the checkpoint's (hash {} vs {})", config.hash(), ckpt.meta.config_hash);
        }
        let want = model.encoder.config.image_size;
        if want != config.data.image_size {
            return Err(Error::Shape(format!(
                "checkpoint expects {want}px inputs, data.image_size is {}",
                config.data.image_size
            )));
        }
    }
    let protocols = if protocols.is_empty() { config.eval.protocols.clone() } else { protocols.to_vec() };
    let out = &common.out;
    write_manifest(
        out,
        "eval",
        &config,
        json!({
            "checkpoint": checkpoint.map(|p| p.display().to_string()),
            "oracle": oracle,
            "protocols": protocols.iter().map(|p| p.name()).collect::<Vec<_>>(),
        }),
    )?;
    let oracle_ex = OracleExtractor { dim: ORACLE_DIM, seed: config.seed };
    let extractor: &dyn DescriptorExtractor = match &loaded {
        Some((model, _, _)) => &model.encoder,
        None => &oracle_ex,
    };
    let mut reports = Vec::new();
    for p in protocols {
        let (q, g) = load_eval(&config, p)?;
        let ev: Evaluation = evaluate(extractor, &q, &g, p)?;
        ev.write_metrics_json(&out.join(format!("metrics_{}.json", p.name())))?;
        ev.write_per_query_csv(&out.join(format!("per_query_{}.csv", p.name())))?;
        ev.write_top_k(&out.join(format!("top{top_k}_{}.csv", p.name())), top_k)?;
        let m = &ev.report;
        println!(
            "{}: R@1 {:.4} R@5 {:.4} R@10 {:.4} AP {:.4} ({} queries, {} gallery, {} excluded)",
            p, m.r1, m.r5, m.r10, m.ap, m.num_queries, m.num_gallery, m.excluded_queries
        );
        reports.push(ev.report);
    }
    write(&out.join(METRICS_JSON), serde_json::to_string_pretty(&reports)? + "\n")?;
    write(&out.join("recall.svg"), recall_chart(&reports))
}

const VARIANTS: [Variant; 3] = [Variant::Pvda, Variant::ConstantAlpha, Variant::NoRestart];
const PRIMARY: Protocol = Protocol::UavToSatSingle;

fn ablation_table(runs: &[RunSummary], seeds: &[u64], config_hash: &str) -> String {
    let seed_list: Vec<String> = seeds.iter().map(u64::to_string).collect();
    let mut s = format!("# seeds={} protocol={PRIMARY} base_config_hash={config_hash}\n", seed_list.join(";"));
    s.push_str("variant,runs,median_R@1,median_R@5,median_R@10,median_AP\n");
    for v in VARIANTS {
        let ms: Vec<&MetricsReport> =
            runs.iter().filter(|r| r.variant == v.name()).filter_map(|r| r.metrics_for(PRIMARY)).collect();
        if ms.is_empty() {
            continue;
        }
        let med = |f: fn(&MetricsReport) -> f64| median(&ms.iter().map(|m| f(m)).collect::<Vec<_>>());
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            v.name(),
            ms.len(),
            med(|m| m.r1),
            med(|m| m.r5),
            med(|m| m.r10),
            med(|m| m.ap)
        ));
    }
    s
}

pub fn ablate(common: &Common, num_seeds: u64) -> Result<()> {
    if num_seeds == 0 {
        return Err(Error::Config("--num-seeds must be at least 1".into()));
    }
    let base = common.build_config(None)?;
    let seeds: Vec<u64> = (0..num_seeds).map(|i| base.seed + i).collect();
    let out = &common.out;
    write_manifest(
        out,
        "ablate",
        &base,
        json!({ "seeds": seeds, "variants": VARIANTS.iter().map(|v| v.name()).collect::<Vec<_>>() }),
    )?;
    let mut runs = Vec::new();
    let mut detail = String::from("variant,seed,config_hash,R@1,R@5,R@10,AP\n");
    for v in VARIANTS {
        for &seed in &seeds {
            let mut cfg = base.clone();
            cfg.schedule.variant = v;
            cfg.seed = seed;
            let cfg = cfg.resolved();
            info!("ablation: {v} seed {seed}");
            let summary = run(&cfg, &TrainOptions::default(), false)?.summary;
            if let Some(m) = summary.metrics_for(PRIMARY) {
                detail.push_str(&format!("{v},{seed},{},{},{},{},{}\n", summary.config_hash, m.r1, m.r5, m.r10, m.ap));
            }
            runs.push(summary);
        }
    }
    let table = ablation_table(&runs, &seeds, &base.hash());
    write(&out.join(ABLATION_CSV), &table)?;
    write(&out.join(ABLATION_RUNS_CSV), detail)?;
    write(&out.join("ablation_runs.json"), serde_json::to_string_pretty(&runs)? + "\n")?;
    write(&out.join("ablation.svg"), ablation_chart(&table)?)?;
    print!("{table}");
    Ok(())
}

struct AblationRow {
    variant: String,
    values: Vec<f64>,
}

fn parse_ablation(text: &str) -> Result<Vec<AblationRow>> {
    let bad = |line: &str| Error::Data(format!("malformed ablation row {line:?}"));
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("variant,") && !l.trim().is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad(line));
            }
            let values = f[2..].iter().map(|x| x.parse::<f64>().map_err(|_| bad(line))).collect::<Result<_>>()?;
            Ok(AblationRow { variant: f[0].to_string(), values })
        })
        .collect()
}

fn ablation_chart(table: &str) -> Result<String> {
    let rows = parse_ablation(table)?;
    let cats: Vec<String> = ["R@1", "R@5", "R@10", "AP"].iter().map(|s| s.to_string()).collect();
    let groups: Vec<(String, Vec<f64>)> = rows.into_iter().map(|r| (r.variant, r.values)).collect();
    Ok(bar_chart("Schedule ablation (median over seeds)", &cats, &groups))
}

fn view_dir(split_root: &str, view: View, query: bool) -> String {
    match (split_root, view, query) {
        ("train", View::Uav, _) => "train/drone".into(),
        ("train", View::Satellite, _) => "train/satellite".into(),
        (_, View::Uav, true) => "test/query_drone".into(),
        (_, View::Satellite, true) => "test/query_satellite".into(),
        (_, View::Uav, false) => "test/gallery_drone".into(),
        (_, View::Satellite, false) => "test/gallery_satellite".into(),
    }
}

fn export(root: &Path, data: &Dataset, split_root: &str, query: bool, counts: &mut BTreeMap<String, usize>) -> Result<()> {
    let mut index: BTreeMap<(String, usize), usize> = BTreeMap::new();
    for s in &data.samples {
        let sub = view_dir(split_root, s.view, query);
        let class = &data.class_names[s.location_id];
        let dir = root.join(&sub).join(class);
        ensure_dir(&dir)?;
        let n = index.entry((sub.clone(), s.location_id)).or_insert(0);
        let path: PathBuf = dir.join(format!("{class}_{:02}.png", *n));
        *n += 1;
        let px = s.image()?;
        let (h, w, _) = px.dim();
        let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let at = |c: usize| (px[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
            image::Rgb([at(0), at(1), at(2)])
        });
        img.save(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        *counts.entry(sub).or_insert(0) += 1;
    }
    Ok(())
}

/// Writes the toy data in the on-disk layout, including the satellite-query
/// and UAV-gallery subtrees of the reverse direction.
pub fn toygen(common: &Common) -> Result<()> {
    let config = common.build_config(None)?;
    if config.data.source != DataSource::Toy {
        return Err(Error::Config("toygen needs data.source = toy".into()));
    }
    let out = &common.out;
    write_manifest(out, "toygen", &config, json!({}))?;
    let toy = generate_toy_dataset(&config.toy_config())?;
    let mut counts = BTreeMap::new();
    export(out, &toy.train, "train", false, &mut counts)?;
    export(out, &toy.query, "test", true, &mut counts)?;
    export(out, &toy.gallery, "test", false, &mut counts)?;
    // reverse direction: satellite queries, UAV gallery
    export(out, &toy.gallery, "test", true, &mut counts)?;
    export(out, &toy.query, "test", false, &mut counts)?;
    for (sub, n) in &counts {
        println!("{sub}: {n} images");
    }
    Ok(())
}

pub fn report(out: &Path) -> Result<()> {
    if !out.is_dir() {
        return Err(Error::Data(format!("output directory {} does not exist", out.display())));
    }
    let mut summary = String::new();
    let log_path = out.join(LOG_FILE);
    if log_path.exists() {
        let log = TrainLog::read(&log_path)?;
        training_plots(out, &log)?;
        summary.push_str(&format!("{}\n", log.header));
        if let Some((e, m)) = log.epoch_means().last() {
            summary.push_str(&format!(
                "final epoch {e}: location {:.6} view {:.6} adversarial {:.6} combined {:.6}\n",
                m[0], m[1], m[2], m[3]
            ));
        }
    }
    let metrics_path = out.join(METRICS_JSON);
    if metrics_path.exists() {
        let text = fs::read_to_string(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
        let reports: Vec<MetricsReport> = serde_json::from_str(&text)?;
        write(&out.join("recall.svg"), recall_chart(&reports))?;
        for m in &reports {
            summary.push_str(&format!(
                "{}: R@1 {:.4} R@5 {:.4} R@10 {:.4} AP {:.4}\n",
                m.protocol, m.r1, m.r5, m.r10, m.ap
            ));
        }
    }
    let abl_path = out.join(ABLATION_CSV);
    if abl_path.exists() {
        let text = fs::read_to_string(&abl_path).map_err(|e| Error::io(&abl_path, e))?;
        write(&out.join("ablation.svg"), ablation_chart(&text)?)?;
        summary.push_str(&text);
    }
    if summary.is_empty() {
        return Err(Error::Data(format!("nothing to report in {}", out.display())));
    }
    write(&out.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}
