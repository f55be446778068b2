use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use serde_json::json;
use tdla_core::coco::{load_coco, load_coco_unchecked, save_coco};
use tdla_core::eval::{evaluate, EvalConfig, EvalMode, EvalResult};
use tdla_core::remap::{apply_map, builtin_map, compact, coverage_report, parse_map};
use tdla_core::report::{
    ablation_fixture, compare_metrics, compare_runs, delta_table, per_category_report, read_results_jsonl, write_results_jsonl,
};
use tdla_core::split::{stratified_split, Split, SplitAssignment};
use tdla_core::stats::{dataset_stats, published_stats};
use tdla_core::synth::{generate_corpus, LayoutFamily, SynthPageSpec};
use tdla_core::{taxonomy, validate_dataset, Dataset};
use tdla_net::{init_detector, train as run_training, Detector, ModelConfig, TrainConfig, TrainData};

use crate::imageio::{load_page_images, save_png};
use crate::manifest::Recorder;
use crate::{CompareArgs, EvalArgs, GenArgs, RemapArgs, SplitArgs, StatsArgs, TrainArgs, ValidateArgs};

/// Exit status for a run that found annotation violations.
const VIOLATIONS: u8 = 2;

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn load(path: &Path) -> Result<Dataset> {
    load_coco(path, None).with_context(|| format!("loading {}", path.display()))
}

/// `key = value` lines; `#` starts a comment.
fn key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for line in text.lines() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| anyhow!("expected key=value, got {line:?}"))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn images_beside(annotations: &Path) -> PathBuf {
    annotations.parent().unwrap_or(Path::new(".")).join("images")
}

pub fn stats(a: StatsArgs) -> Result<ExitCode> {
    let mut rec = Recorder::start("stats");
    let table = if a.published {
        rec.config(json!({ "published": true }));
        published_stats().to_table()
    } else {
        let input = a.input.as_deref().expect("clap requires input");
        rec.input(input);
        let d = load(input)?;
        let split = match &a.splits {
            Some(p) => {
                rec.input(p);
                Some(SplitAssignment::from_manifest(&read_text(p)?)?)
            }
            None => None,
        };
        dataset_stats(&d, split.as_ref()).to_table()
    };
    print!("{table}");
    write_text(&a.out, &table)?;
    rec.output(&a.out);
    rec.finish_beside(&a.out)?;
    Ok(ExitCode::SUCCESS)
}

fn parse_ratios(s: &str) -> Result<[f64; 3]> {
    let v: Vec<f64> =
        s.split(',').map(|x| x.trim().parse::<f64>()).collect::<std::result::Result<_, _>>().with_context(|| format!("ratios {s:?}"))?;
    <[f64; 3]>::try_from(v).map_err(|_| anyhow!("ratios need three values, got {s:?}"))
}

pub fn split(a: SplitArgs) -> Result<ExitCode> {
    let ratios = parse_ratios(&a.ratios)?;
    let d = load(&a.input)?;
    let assignment = stratified_split(&d, ratios, a.seed)?;
    create_dir(&a.out_dir)?;
    let mut rec = Recorder::start("split");
    rec.config(json!({ "ratios": ratios })).seed(a.seed).input(&a.input);
    for s in Split::ALL {
        let path = a.out_dir.join(format!("{}.json", s.as_str()));
        save_coco(&assignment.subset(&d, s), &path)?;
        rec.output(&path);
    }
    let manifest = a.out_dir.join("split.tsv");
    write_text(&manifest, &assignment.to_manifest())?;
    rec.output(&manifest);
    let [tr, va, te] = assignment.sizes();
    println!("train {tr}\tval {va}\ttest {te}");
    rec.finish_in(&a.out_dir)?;
    Ok(ExitCode::SUCCESS)
}

pub fn remap(a: RemapArgs) -> Result<ExitCode> {
    let d = load(&a.input)?;
    let mut rec = Recorder::start("remap");
    rec.input(&a.input);
    let file = Path::new(&a.map);
    let map = if file.is_file() {
        rec.input(file);
        parse_map(&read_text(file)?, None, None)?
    } else {
        builtin_map(&a.map).with_context(|| format!("{:?} is neither a builtin map nor a file", a.map))?
    };
    rec.config(json!({ "map": a.map }));
    print!("{}", coverage_report(&map, &d.taxonomy).to_table());
    let out = apply_map(&d, &map)?;
    save_coco(&out, &a.out)?;
    println!("{} of {} instances kept", out.instance_count(), d.instance_count());
    rec.output(&a.out);
    rec.finish_beside(&a.out)?;
    Ok(ExitCode::SUCCESS)
}

/// Corpus description for `gen`, built from spec-file keys then flags.
struct GenPlan {
    family: LayoutFamily,
    pages: usize,
    seed: u64,
    taxonomy: String,
    palette: Option<Vec<String>>,
    instances: Option<(usize, usize)>,
    size: [Option<u32>; 5],
    full_taxonomy: bool,
}

const SIZE_KEYS: [&str; 5] = ["width", "height", "margin", "gap", "min_block"];

impl GenPlan {
    fn set(&mut self, k: &str, v: &str) -> Result<()> {
        let bad = || anyhow!("gen spec: cannot parse {k} = {v:?}");
        match k {
            "family" => self.family = v.parse()?,
            "pages" => self.pages = v.parse().map_err(|_| bad())?,
            "seed" => self.seed = v.parse().map_err(|_| bad())?,
            "taxonomy" => self.taxonomy = v.into(),
            "palette" => self.palette = Some(v.split(',').map(|s| s.trim().to_string()).collect()),
            "instances" => {
                let (lo, hi) = v.split_once(',').ok_or_else(bad)?;
                self.instances = Some((lo.trim().parse().map_err(|_| bad())?, hi.trim().parse().map_err(|_| bad())?));
            }
            "full_taxonomy" => self.full_taxonomy = v.parse().map_err(|_| bad())?,
            _ => match SIZE_KEYS.iter().position(|&s| s == k) {
                Some(i) => self.size[i] = Some(v.parse().map_err(|_| bad())?),
                None => bail!("gen spec: unknown key {k:?}"),
            },
        }
        Ok(())
    }

    fn spec(&self) -> Result<SynthPageSpec> {
        let mut spec = SynthPageSpec::toy(self.family);
        if self.taxonomy != spec.taxonomy.id {
            spec.taxonomy = taxonomy::builtin(&self.taxonomy).ok_or_else(|| anyhow!("unknown taxonomy {:?}", self.taxonomy))?;
            if self.palette.is_none() {
                spec.palette = spec.taxonomy.categories.iter().map(|c| c.id).take(4).collect();
            }
        }
        if let Some(names) = &self.palette {
            spec.palette = names
                .iter()
                .map(|n| spec.taxonomy.id_of(n).ok_or_else(|| anyhow!("{n:?} is not in {}", spec.taxonomy.id)))
                .collect::<Result<_>>()?;
        }
        if let Some(r) = self.instances {
            spec.instances = r;
        }
        let fields = [&mut spec.width, &mut spec.height, &mut spec.margin, &mut spec.gap, &mut spec.min_block];
        for (f, v) in fields.into_iter().zip(self.size) {
            if let Some(v) = v {
                *f = v;
            }
        }
        Ok(spec)
    }

    fn snapshot(&self, spec: &SynthPageSpec) -> serde_json::Value {
        let palette: Vec<&str> = spec.palette.iter().filter_map(|&c| spec.taxonomy.name_of(c)).collect();
        json!({
            "family": format!("{:?}", spec.family),
            "pages": self.pages,
            "taxonomy": spec.taxonomy.id,
            "palette": palette,
            "instances": [spec.instances.0, spec.instances.1],
            "width": spec.width,
            "height": spec.height,
            "margin": spec.margin,
            "gap": spec.gap,
            "min_block": spec.min_block,
            "full_taxonomy": self.full_taxonomy,
        })
    }
}

pub fn gen(a: GenArgs) -> Result<ExitCode> {
    let mut plan = GenPlan {
        family: LayoutFamily::Manhattan,
        pages: 20,
        seed: 0,
        taxonomy: "m6doc".into(),
        palette: None,
        instances: None,
        size: [None; 5],
        full_taxonomy: false,
    };
    let mut rec = Recorder::start("gen");
    if let Some(p) = &a.spec {
        rec.input(p);
        for (k, v) in key_values(&read_text(p)?)? {
            plan.set(&k, &v)?;
        }
    }
    if let Some(f) = &a.family {
        plan.family = f.parse()?;
    }
    if let Some(n) = a.pages {
        plan.pages = n;
    }
    if let Some(s) = a.seed {
        plan.seed = s;
    }
    plan.full_taxonomy |= a.full_taxonomy;
    let spec = plan.spec()?;
    let (d, images) = generate_corpus(&spec, plan.pages, plan.seed)?;
    let d = if plan.full_taxonomy { d } else { compact(&d) };

    let img_dir = a.out_dir.join("images");
    create_dir(&img_dir)?;
    for (p, img) in d.pages.iter().zip(&images) {
        save_png(img, &img_dir.join(&p.file_name))?;
    }
    let ann = a.out_dir.join("annotations.json");
    save_coco(&d, &ann)?;
    println!("{} pages, {} instances, {} categories", d.pages.len(), d.instance_count(), d.taxonomy.len());
    rec.config(plan.snapshot(&spec)).seed(plan.seed).output(&img_dir).output(&ann);
    rec.finish_in(&a.out_dir)?;
    Ok(ExitCode::SUCCESS)
}

/// Training and model settings resolved as defaults < config file < flags < `--set`.
struct TrainPlan {
    train: TrainConfig,
    model: ModelConfig,
}

impl TrainPlan {
    fn set(&mut self, k: &str, v: &str) -> Result<()> {
        match k.strip_prefix("model.") {
            Some(mk) => self.model.set(mk, v)?,
            None if k == "preset" => {}
            None => self.train.set(k, v)?,
        }
        Ok(())
    }

    fn preset(name: &str) -> Result<ModelConfig> {
        match name {
            "toy" => Ok(ModelConfig::toy(0)),
            "full" => Ok(ModelConfig::full(0)),
            _ => bail!("unknown preset {name:?}; expected toy or full"),
        }
    }

    fn resolve(a: &TrainArgs) -> Result<Self> {
        let file = match &a.config {
            Some(p) => key_values(&read_text(p)?)?,
            None => Vec::new(),
        };
        let from_file = file.iter().rev().find(|(k, _)| k == "preset").map(|(_, v)| v.as_str());
        let preset = a.preset.as_deref().or(from_file).unwrap_or("toy");
        let mut plan = TrainPlan { train: TrainConfig::default(), model: Self::preset(preset)? };
        for (k, v) in &file {
            plan.set(k, v)?;
        }
        let t = &mut plan.train;
        if let Some(v) = a.epochs {
            t.epochs = v;
        }
        if let Some(v) = a.base_lr {
            t.base_lr = v;
        }
        if let Some(v) = a.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = a.seed {
            t.seed = v;
        }
        if let Some(v) = a.eval_every {
            t.eval_every = v;
        }
        if let Some(v) = a.workers {
            t.workers = v;
        }
        let m = &mut plan.model;
        m.use_encoder &= !a.no_encoder;
        m.use_dynamic_decoder &= !a.no_dynamic_decoder;
        m.shared_heads &= !a.no_shared_heads;
        m.shared_trunk |= a.shared_trunk;
        for kv in &a.overrides {
            let (k, v) = kv.split_once('=').ok_or_else(|| anyhow!("--set expects key=value, got {kv:?}"))?;
            plan.set(k.trim(), v.trim())?;
        }
        plan.train.validate()?;
        Ok(plan)
    }

    /// Flat text that `--config` reads back to the same settings.
    fn to_text(&self) -> String {
        let mut s = self.train.to_text();
        let v = serde_json::to_value(&self.model).expect("model config serializes");
        for (k, v) in v.as_object().expect("struct") {
            let text = match v {
                serde_json::Value::Array(xs) => xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","),
                other => other.to_string(),
            };
            if k != "num_classes" {
                s.push_str(&format!("model.{k} = {text}\n"));
            }
        }
        s
    }
}

pub fn train(a: TrainArgs) -> Result<ExitCode> {
    let plan = TrainPlan::resolve(&a)?;
    let d = load(&a.data)?;
    let img_dir = a.images.clone().unwrap_or_else(|| images_beside(&a.data));
    let images = load_page_images(&d.pages, &img_dir)?;
    let det = init_detector(&d, plan.model.clone(), plan.train.seed)?;
    println!(
        "{} pages, {} classes, {} parameters, {} epochs",
        d.pages.len(),
        d.taxonomy.len(),
        det.model.num_parameters(),
        plan.train.epochs
    );

    create_dir(&a.out_dir)?;
    let mut rec = Recorder::start("train");
    rec.config(json!({ "train": plan.train, "model": det.model.cfg })).seed(plan.train.seed).input(&a.data).input(&img_dir);
    if let Some(p) = &a.config {
        rec.input(p);
    }
    let config_path = a.out_dir.join("config.txt");
    write_text(&config_path, &plan.to_text())?;

    let metrics_path = a.out_dir.join("metrics.jsonl");
    let mut sink =
        std::io::BufWriter::new(fs::File::create(&metrics_path).with_context(|| format!("creating {}", metrics_path.display()))?);
    let data = TrainData { dataset: d, images };
    let out = run_training(det, &data, &plan.train, Some(&mut sink))?;
    std::io::Write::flush(&mut sink)?;

    let ckpt = a.out_dir.join("model.tdla");
    out.detector.save(&ckpt)?;
    if let Some(last) = out.log.last() {
        println!("{} steps, final loss {:.4}", out.steps, last.loss);
    }
    if let Some(e) = out.log.iter().rev().find_map(|r| r.eval) {
        println!("last eval: det mAP {:.4}, seg mAP {:.4}", e.det_map, e.seg_map);
    }
    rec.output(&ckpt).output(&metrics_path).output(&config_path);
    rec.finish_in(&a.out_dir)?;
    Ok(ExitCode::SUCCESS)
}

fn modes(s: &str) -> Result<Vec<EvalMode>> {
    if s == "both" {
        return Ok(vec![EvalMode::Boxes, EvalMode::Masks]);
    }
    Ok(vec![s.parse()?])
}

fn print_result(r: &EvalResult) {
    println!("# {:?}", r.mode);
    for (name, v) in r.metrics().iter().take(4) {
        println!("{name}\t{:.4}", v);
    }
    print!("{}", per_category_report(r).to_table());
}

pub fn eval(a: EvalArgs) -> Result<ExitCode> {
    let modes = modes(&a.mode)?;
    let gt = load(&a.gt)?;
    let cfg = EvalConfig { max_dets: a.max_dets, ..Default::default() };
    let mut rec = Recorder::start("eval");
    rec.input(&a.gt);
    let preds = match (&a.predictions, &a.checkpoint) {
        (Some(p), _) => {
            rec.input(p);
            load_coco(p, Some(&gt.taxonomy)).with_context(|| format!("loading {}", p.display()))?
        }
        (None, Some(c)) => {
            let det = Detector::load(c).with_context(|| format!("loading {}", c.display()))?;
            let img_dir = a.images.clone().unwrap_or_else(|| images_beside(&a.gt));
            let images = load_page_images(&gt.pages, &img_dir)?;
            rec.input(c).input(&img_dir);
            det.predict_dataset(&gt.pages, &images, a.score_threshold, a.max_dets, a.workers)?
        }
        (None, None) => unreachable!("clap requires one source"),
    };
    if let Some(p) = &a.save_predictions {
        save_coco(&preds, p)?;
        rec.output(p);
    }
    let results: Vec<EvalResult> = modes.iter().map(|&m| evaluate(&preds, &gt, &cfg, m)).collect::<std::result::Result<_, _>>()?;
    for r in &results {
        print_result(r);
    }
    write_results_jsonl(&a.out, &results)?;
    rec.config(json!({
        "mode": a.mode,
        "score_threshold": a.score_threshold,
        "max_dets": a.max_dets,
        "workers": a.workers,
    }))
    .output(&a.out);
    rec.finish_beside(&a.out)?;
    Ok(ExitCode::SUCCESS)
}

pub fn compare(a: CompareArgs) -> Result<ExitCode> {
    let mut rec = Recorder::start("compare");
    let mut text = String::new();
    if a.ablation_fixture {
        rec.config(json!({ "ablation_fixture": true }));
        let rows = ablation_fixture();
        let full = &rows.iter().find(|(n, _)| n == "full").ok_or_else(|| anyhow!("fixture has no full row"))?.1;
        for (name, metrics) in rows.iter().filter(|(n, _)| n != "full") {
            text.push_str(&format!("# full -> {name}\n"));
            text.push_str(&delta_table(&compare_metrics(full, metrics)));
        }
    } else {
        let (pa, pb) = (a.a.as_deref().expect("clap"), a.b.as_deref().expect("clap"));
        rec.input(pa).input(pb);
        let (ra, rb) = (read_results_jsonl(pa)?, read_results_jsonl(pb)?);
        for x in &ra {
            let y = rb.iter().find(|y| y.mode == x.mode).ok_or_else(|| anyhow!("{} has no {:?} result", pb.display(), x.mode))?;
            text.push_str(&format!("# {:?}\n", x.mode));
            text.push_str(&delta_table(&compare_runs(x, y)?));
        }
    }
    print!("{text}");
    write_text(&a.out, &text)?;
    rec.output(&a.out);
    rec.finish_beside(&a.out)?;
    Ok(ExitCode::SUCCESS)
}

pub fn validate(a: ValidateArgs) -> Result<ExitCode> {
    let d = load_coco_unchecked(&a.input, None).with_context(|| format!("loading {}", a.input.display()))?;
    let violations = validate_dataset(&d);
    let report: String = violations.iter().map(|v| format!("{v}\n")).collect();
    if violations.is_empty() {
        println!("ok: {} pages, {} instances", d.pages.len(), d.instance_count());
    } else {
        print!("{report}");
        eprintln!("{} violations", violations.len());
    }
    if let Some(p) = &a.report {
        write_text(p, &report)?;
        let mut rec = Recorder::start("validate");
        rec.input(&a.input).output(p);
        rec.finish_beside(p)?;
    }
    Ok(if violations.is_empty() { ExitCode::SUCCESS } else { ExitCode::from(VIOLATIONS) })
}
