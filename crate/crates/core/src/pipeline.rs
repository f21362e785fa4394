//! File-driven pipeline stages. Each stage reads the artifacts of earlier
//! stages from the run directory and writes its own:
//!
//! ```text
//! data/     image_NNN.pgm, label_NNN.pgm, manifest.txt
//! base/     spec.txt, folds.txt, fold_F.{params,curve,history.csv}
//! mdpm/     train.mdpm, train.provenance[, test.mdpm]
//! icnn/     spec.txt, model_M.{params,curve,history.csv,val}, losses.txt
//! refine/   planes.txt, refined_roundK.mdpm
//! eval/     report.csv, summary.txt
//! ```
//!
//! Every write goes to a temporary file that is renamed into place, so an
//! interrupted stage never leaves a truncated artifact behind.

use std::fmt::Write as _;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::icnn::{refine_once, train_icnn, RefineTrace};
use crate::imaging::{
    decode_probstack, encode_gray_pgm, encode_label_pgm, encode_probstack, read_pgm, synth_stack, GrayImage,
    LabelMap, PgmImage, ProbMap, Stack,
};
use crate::inference::{ensemble_map, fold_mdpms, train_fold_models, ModelTrainConfig, TrainedModel};
use crate::metrics::{round_report, RoundReport};
use crate::net::{read_params, write_params, NetworkSpec};
use crate::sampling::{kfold_plan, Fold, FoldPlan};
use crate::seed;
use crate::training::{CalibrationCurve, TrainConfig, TrainHistory};

/// Writes `bytes` to `path` through a sibling temporary file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))
}

fn stage_seed(cfg: &RunConfig, label: &str) -> u64 {
    seed::derive(cfg.seed, label)
}

fn with_seed(m: &ModelTrainConfig, seed_value: u64) -> ModelTrainConfig {
    ModelTrainConfig { train: TrainConfig { seed: seed_value, ..m.train.clone() }, ..m.clone() }
}

fn sorted_files(dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Format(format!("cannot list {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with(prefix) && n.ends_with(".pgm"))
        })
        .collect();
    out.sort();
    Ok(out)
}

fn manifest_line(dir: &Path, name: &str) -> Result<String> {
    let bytes = fs::read(dir.join(name))?;
    Ok(format!("{name} {} {:016x}", bytes.len(), seed::fnv1a(&bytes)))
}

fn write_planes(
    dir: &Path,
    prefix: &str,
    images: &Stack<f64>,
    labels: &Stack<u32>,
    manifest: &mut String,
) -> Result<()> {
    for (i, (img, lab)) in images.planes().iter().zip(labels.planes()).enumerate() {
        for (name, bytes) in [
            (format!("{prefix}image_{i:03}.pgm"), encode_gray_pgm(img)),
            (format!("{prefix}label_{i:03}.pgm"), encode_label_pgm(lab)?),
        ] {
            write_atomic(&dir.join(&name), &bytes)?;
            writeln!(manifest, "{}", manifest_line(dir, &name)?).unwrap();
        }
    }
    Ok(())
}

/// Writes the synthetic stack as PGM planes plus a manifest of
/// `name bytes fnv1a64` lines.
pub fn cmd_synth(cfg: &RunConfig) -> Result<String> {
    cfg.validate()?;
    let dir = cfg.data_dir();
    let (images, labels) = synth_stack(&cfg.synth, cfg.planes, stage_seed(cfg, "synth"))?;
    let mut manifest = String::new();
    write_planes(&dir, "", &images, &labels, &mut manifest)?;
    write_atomic(&dir.join("manifest.txt"), manifest.as_bytes())?;
    if cfg.test_planes > 0 {
        let (ti, tl) = synth_stack(&cfg.synth, cfg.test_planes, stage_seed(cfg, "synth-test"))?;
        let mut test_manifest = String::new();
        write_planes(&dir, "test_", &ti, &tl, &mut test_manifest)?;
        write_atomic(&dir.join("test_manifest.txt"), test_manifest.as_bytes())?;
    }
    Ok(format!("wrote {} image and {} label planes to {}", images.len(), labels.len(), dir.display()))
}

/// Checks every manifest entry against the file on disk.
pub fn verify_manifest(dir: &Path) -> Result<usize> {
    let text = read_text(&dir.join("manifest.txt"))?;
    let mut n = 0;
    for line in text.lines().filter(|l| !l.is_empty()) {
        let name = line.split(' ').next().unwrap_or_default();
        if manifest_line(dir, name)? != line {
            return Err(Error::Format(format!("{name} does not match the manifest")));
        }
        n += 1;
    }
    Ok(n)
}

fn load_stack(cfg: &RunConfig, prefix: &str) -> Result<(Vec<GrayImage>, Vec<LabelMap>)> {
    let dir = cfg.data_dir();
    let image_paths = sorted_files(&dir, &format!("{prefix}image_"))?;
    let label_paths = sorted_files(&dir, &format!("{prefix}label_"))?;
    if image_paths.len() != label_paths.len() {
        return Err(Error::Format(format!(
            "{}: {} images but {} label planes",
            dir.display(),
            image_paths.len(),
            label_paths.len()
        )));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (ip, lp) in image_paths.iter().zip(&label_paths) {
        match read_pgm(ip)? {
            PgmImage::Gray(g) => images.push(g),
            PgmImage::Labels(_) => return Err(Error::Format(format!("{} is not an 8-bit image", ip.display()))),
        }
        match read_pgm(lp)? {
            PgmImage::Labels(l) => labels.push(l),
            PgmImage::Gray(_) => return Err(Error::Format(format!("{} is not a 16-bit label map", lp.display()))),
        }
    }
    Ok((images, labels))
}

/// Loads the training planes, checking them against the manifest when one
/// exists. External data directories may come without one.
fn load_training_stack(cfg: &RunConfig) -> Result<(Vec<GrayImage>, Vec<LabelMap>)> {
    if cfg.data_dir().join("manifest.txt").exists() {
        verify_manifest(&cfg.data_dir())?;
    }
    let (images, labels) = load_stack(cfg, "")?;
    if images.is_empty() {
        return Err(Error::Format(format!("no image planes in {}", cfg.data_dir().display())));
    }
    Ok((images, labels))
}

fn save_model(dir: &Path, name: &str, model: &TrainedModel) -> Result<()> {
    let mut params = Vec::new();
    write_params(&model.params, &mut params)?;
    write_atomic(&dir.join(format!("{name}.params")), &params)?;
    write_atomic(&dir.join(format!("{name}.curve")), model.curve.to_text().as_bytes())?;
    write_atomic(&dir.join(format!("{name}.history.csv")), model.history.to_csv().as_bytes())?;
    Ok(())
}

fn load_model(dir: &Path, name: &str, spec: &NetworkSpec) -> Result<TrainedModel> {
    let path = dir.join(format!("{name}.params"));
    let file = fs::File::open(&path).map_err(|e| Error::Format(format!("cannot open {}: {e}", path.display())))?;
    let params = read_params(BufReader::new(file))?;
    params.check(spec)?;
    let curve = CalibrationCurve::from_text(&read_text(&dir.join(format!("{name}.curve")))?)?;
    Ok(TrainedModel { spec: spec.clone(), params, curve, history: TrainHistory::default() })
}

fn load_spec(path: &Path) -> Result<NetworkSpec> {
    NetworkSpec::from_text(&read_text(path)?)
}

fn folds_text(plan: &FoldPlan) -> String {
    let list = |v: &[usize]| v.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",");
    plan.folds
        .iter()
        .enumerate()
        .map(|(f, fold)| format!("fold={f} held_out={} train={}\n", list(&fold.held_out), list(&fold.train)))
        .collect()
}

fn parse_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| Error::Format(format!("bad plane index `{t}`"))))
        .collect()
}

fn parse_folds(text: &str) -> Result<FoldPlan> {
    let mut folds = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let mut held_out = None;
        let mut train = None;
        for field in line.split_whitespace() {
            match field.split_once('=') {
                Some(("held_out", v)) => held_out = Some(parse_list(v)?),
                Some(("train", v)) => train = Some(parse_list(v)?),
                Some(("fold", _)) => {}
                _ => return Err(Error::Format(format!("bad fold line `{line}`"))),
            }
        }
        match (held_out, train) {
            (Some(held_out), Some(train)) => folds.push(Fold { train, held_out }),
            _ => return Err(Error::Format(format!("bad fold line `{line}`"))),
        }
    }
    Ok(FoldPlan { folds })
}

/// Trains one base network per fold. Artifacts are written even when a
/// fold diverges; the command then reports the divergence as an error.
pub fn cmd_train_base(cfg: &RunConfig) -> Result<String> {
    cfg.validate()?;
    let (images, labels) = load_training_stack(cfg)?;
    if images.len() % cfg.folds != 0 {
        return Err(Error::Config(format!("{} folds do not divide {} planes", cfg.folds, images.len())));
    }
    let plan = kfold_plan(images.len(), cfg.folds, stage_seed(cfg, "folds"))?;
    let dir = cfg.out_dir.join("base");
    let model_cfg = with_seed(&cfg.base, stage_seed(cfg, "train-base"));
    let models = train_fold_models(&images, &labels, &plan, &cfg.base_spec, &model_cfg)?;
    write_atomic(&dir.join("spec.txt"), cfg.base_spec.to_text().as_bytes())?;
    write_atomic(&dir.join("folds.txt"), folds_text(&plan).as_bytes())?;
    let mut diverged = Vec::new();
    for (f, m) in models.iter().enumerate() {
        save_model(&dir, &format!("fold_{f}"), m)?;
        if m.history.diverged {
            diverged.push(f);
        }
    }
    if !diverged.is_empty() {
        return Err(Error::Diverged(format!("base training diverged in folds {diverged:?}")));
    }
    Ok(format!("trained {} fold models into {}", models.len(), dir.display()))
}

/// Out-of-fold maps for the training stack, with a provenance sidecar, and
/// ensemble maps for any `test_` planes in the data directory.
pub fn cmd_gen_mdpm(cfg: &RunConfig) -> Result<String> {
    cfg.validate()?;
    let (images, _) = load_training_stack(cfg)?;
    let base = cfg.out_dir.join("base");
    let spec = load_spec(&base.join("spec.txt"))?;
    let plan = parse_folds(&read_text(&base.join("folds.txt"))?)?;
    let models = (0..plan.k())
        .map(|f| load_model(&base, &format!("fold_{f}"), &spec))
        .collect::<Result<Vec<_>>>()?;
    let gen = fold_mdpms(&models, &images, &plan, cfg.base.tta, cfg.base.mode)?;
    gen.verify_no_leakage(&plan)?;
    let dir = cfg.out_dir.join("mdpm");
    write_atomic(&dir.join("train.mdpm"), &encode_probstack(&Stack::new(gen.maps)?))?;
    let mut sidecar = String::new();
    for p in &gen.provenance {
        // Relative to the run directory, so moved runs still compare equal.
        writeln!(sidecar, "plane={} fold={} model=base/fold_{}.params", p.plane, p.fold, p.fold).unwrap();
    }
    write_atomic(&dir.join("train.provenance"), sidecar.as_bytes())?;
    let mut msg = format!("wrote {} out-of-fold maps to {}", images.len(), dir.display());

    let (test_images, _) = load_stack(cfg, "test_")?;
    if !test_images.is_empty() {
        let maps = test_images
            .iter()
            .map(|p| ensemble_map(&models, p, cfg.base.tta, cfg.base.mode))
            .collect::<Result<Vec<_>>>()?;
        write_atomic(&dir.join("test.mdpm"), &encode_probstack(&Stack::new(maps)?))?;
        write!(msg, " and {} ensemble test maps", test_images.len()).unwrap();
    }
    Ok(msg)
}

/// Reads a provenance sidecar and checks it against a fold plan.
pub fn verify_provenance(sidecar: &str, plan: &FoldPlan, n_planes: usize) -> Result<()> {
    let mut seen = vec![false; n_planes];
    for line in sidecar.lines().filter(|l| !l.is_empty()) {
        let field = |k: &str| -> Result<usize> {
            line.split_whitespace()
                .find_map(|f| f.strip_prefix(k).and_then(|v| v.strip_prefix('=')))
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Format(format!("bad provenance line `{line}`")))
        };
        let (plane, fold) = (field("plane")?, field("fold")?);
        let f = plan.folds.get(fold).ok_or_else(|| Error::Format(format!("unknown fold {fold}")))?;
        if plane >= n_planes || f.train.contains(&plane) || !f.held_out.contains(&plane) || seen[plane] {
            return Err(Error::InvalidArgument(format!("plane {plane} leaks into fold {fold}")));
        }
        seen[plane] = true;
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::InvalidArgument("provenance does not cover every plane".into()));
    }
    Ok(())
}

fn read_stack(path: &Path) -> Result<Vec<ProbMap>> {
    let bytes = fs::read(path).map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))?;
    let (stack, clamped) = decode_probstack(&bytes)?;
    if clamped > 0 {
        warn!("{}: clamped {clamped} values into [0, 1]", path.display());
    }
    Ok(stack.into_planes())
}

/// Disjoint validation plane sets, one per refinement network.
pub fn icnn_splits(n_planes: usize, models: usize, val_planes: usize, seed_value: u64) -> Result<Vec<Vec<usize>>> {
    if models * val_planes >= n_planes {
        return Err(Error::Config(format!(
            "{models} models with {val_planes} validation planes need more than {n_planes} planes"
        )));
    }
    let mut order: Vec<usize> = (0..n_planes).collect();
    order.shuffle(&mut seed::rng(seed_value));
    Ok(order
        .chunks(val_planes)
        .take(models)
        .map(|c| {
            let mut v = c.to_vec();
            v.sort_unstable();
            v
        })
        .collect())
}

/// Trains the refinement networks on the out-of-fold maps.
pub fn cmd_train_icnn(cfg: &RunConfig) -> Result<String> {
    cfg.validate()?;
    let (_, labels) = load_training_stack(cfg)?;
    let maps = read_stack(&cfg.out_dir.join("mdpm").join("train.mdpm"))?;
    if maps.len() != labels.len() {
        return Err(Error::Format(format!("{} maps for {} label planes", maps.len(), labels.len())));
    }
    let splits = icnn_splits(maps.len(), cfg.icnn_models, cfg.icnn.val_planes, stage_seed(cfg, "icnn-split"))?;
    let dir = cfg.out_dir.join("icnn");
    write_atomic(&dir.join("spec.txt"), cfg.icnn_spec.to_text().as_bytes())?;
    let mut losses = String::new();
    let mut diverged = Vec::new();
    for (m, val) in splits.iter().enumerate() {
        let train: Vec<usize> = (0..maps.len()).filter(|i| !val.contains(i)).collect();
        let model_cfg = with_seed(&cfg.icnn, stage_seed(cfg, &format!("train-icnn-{m}")));
        let out = train_icnn(&maps, &labels, &train, val, &cfg.icnn_spec, &model_cfg)?;
        let name = format!("model_{m}");
        save_model(&dir, &name, &out.model)?;
        let list: Vec<String> = val.iter().map(|i| i.to_string()).collect();
        write_atomic(&dir.join(format!("{name}.val")), format!("{}\n", list.join(",")).as_bytes())?;
        writeln!(losses, "model={m} val_loss={:.6} center_copy_loss={:.6}", out.val_loss, out.center_copy_loss)
            .unwrap();
        info!("refinement model {m}: val loss {:.4}, center copy {:.4}", out.val_loss, out.center_copy_loss);
        if out.model.history.diverged {
            diverged.push(m);
        }
    }
    write_atomic(&dir.join("losses.txt"), losses.as_bytes())?;
    if !diverged.is_empty() {
        return Err(Error::Diverged(format!("refinement training diverged for models {diverged:?}")));
    }
    Ok(format!("trained {} refinement models into {}", splits.len(), dir.display()))
}

/// Which plane each refinement output comes from and which model refines it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefinePlan {
    /// `(plane, model)` in stack order.
    pub entries: Vec<(usize, usize)>,
}

impl RefinePlan {
    fn to_text(&self) -> String {
        self.entries.iter().map(|(p, m)| format!("plane={p} model={m}\n")).collect()
    }

    fn parse(text: &str) -> Result<Self> {
        let entries = text
            .lines()
            .filter(|l| !l.is_empty())
            .map(|line| {
                let mut it = line.split_whitespace();
                match (
                    it.next().and_then(|f| f.strip_prefix("plane=")).and_then(|v| v.parse().ok()),
                    it.next().and_then(|f| f.strip_prefix("model=")).and_then(|v| v.parse().ok()),
                ) {
                    (Some(p), Some(m)) => Ok((p, m)),
                    _ => Err(Error::Format(format!("bad refine plan line `{line}`"))),
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self { entries })
    }
}

fn round_path(dir: &Path, k: usize) -> PathBuf {
    dir.join(format!("refined_round{k}.mdpm"))
}

/// Values stored on disk are `f32`; rounds continue from the stored
/// precision so a resumed run matches an uninterrupted one bit for bit.
fn to_storage_precision(map: ProbMap) -> ProbMap {
    map.map(|&v| v as f32 as f64)
}

/// Refines every model's validation planes for `cfg.rounds` rounds, writing
/// one stack per round. Existing complete round files are reused.
pub fn cmd_refine(cfg: &RunConfig) -> Result<String> {
    cfg.validate()?;
    let icnn_dir = cfg.out_dir.join("icnn");
    let spec = load_spec(&icnn_dir.join("spec.txt"))?;
    let maps = read_stack(&cfg.out_dir.join("mdpm").join("train.mdpm"))?;
    let mut models = Vec::new();
    let mut entries = Vec::new();
    for m in 0.. {
        if !icnn_dir.join(format!("model_{m}.params")).exists() {
            break;
        }
        models.push(load_model(&icnn_dir, &format!("model_{m}"), &spec)?);
        for p in parse_list(read_text(&icnn_dir.join(format!("model_{m}.val")))?.trim())? {
            if p >= maps.len() {
                return Err(Error::Format(format!("validation plane {p} outside the map stack")));
            }
            entries.push((p, m));
        }
    }
    if models.is_empty() {
        return Err(Error::Format(format!("no refinement models in {}", icnn_dir.display())));
    }
    let plan = RefinePlan { entries };
    let dir = cfg.out_dir.join("refine");
    write_atomic(&dir.join("planes.txt"), plan.to_text().as_bytes())?;

    let round0: Vec<ProbMap> = plan.entries.iter().map(|&(p, _)| maps[p].clone()).collect();
    write_atomic(&round_path(&dir, 0), &encode_probstack(&Stack::new(round0.clone())?))?;
    let mut current = round0;
    let mut start = 1;
    while start <= cfg.rounds {
        let path = round_path(&dir, start);
        let Ok(stored) = read_stack(&path) else { break };
        if stored.len() != current.len() || stored.iter().zip(&current).any(|(a, b)| a.dims() != b.dims()) {
            break;
        }
        current = stored;
        start += 1;
    }
    if start > 1 {
        info!("resuming after round {}", start - 1);
    }
    let mode = cfg.icnn.train.mask_mode;
    for k in start..=cfg.rounds {
        current = plan
            .entries
            .iter()
            .zip(&current)
            .map(|(&(_, m), map)| {
                let model = &models[m];
                let curve = cfg.recalibrate.then_some(&model.curve);
                refine_once(&model.spec, &model.params, map, curve, mode).map(to_storage_precision)
            })
            .collect::<Result<_>>()?;
        write_atomic(&round_path(&dir, k), &encode_probstack(&Stack::new(current.clone())?))?;
        info!("round {k} written");
    }
    Ok(format!("{} rounds for {} planes in {}", cfg.rounds, plan.entries.len(), dir.display()))
}

/// Scores every stored round against the ground truth.
pub fn cmd_eval(cfg: &RunConfig) -> Result<(RoundReport, String)> {
    cfg.validate()?;
    let (_, labels) = load_training_stack(cfg)?;
    let dir = cfg.out_dir.join("refine");
    let plan = RefinePlan::parse(&read_text(&dir.join("planes.txt"))?)?;
    let mut per_plane: Vec<Vec<ProbMap>> = vec![Vec::new(); plan.entries.len()];
    for k in 0..=cfg.rounds {
        let stack = read_stack(&round_path(&dir, k))?;
        if stack.len() != plan.entries.len() {
            return Err(Error::Format(format!("round {k} holds {} planes, expected {}", stack.len(), plan.entries.len())));
        }
        for (v, m) in per_plane.iter_mut().zip(stack) {
            v.push(m);
        }
    }
    let traces = per_plane.into_iter().map(RefineTrace::new).collect::<Result<Vec<_>>>()?;
    let gts: Vec<LabelMap> = plan
        .entries
        .iter()
        .map(|&(p, _)| labels.get(p).cloned().ok_or_else(|| Error::Format(format!("no labels for plane {p}"))))
        .collect::<Result<_>>()?;
    let report = round_report(&traces, &gts, &cfg.grid)?;
    let out = cfg.out_dir.join("eval");
    write_atomic(&out.join("report.csv"), report.to_csv().as_bytes())?;
    let summary = report.summary();
    write_atomic(&out.join("summary.txt"), format!("{summary}\n").as_bytes())?;
    Ok((report, summary))
}
