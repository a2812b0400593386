use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use fsayolo::checkpoint;
use fsayolo::data::{generate, load_dataset, Dataset, RgbImage, SceneSpec};
use fsayolo::gradcheck::full_suite;
use fsayolo::metrics::{evaluate, CSV_HEADER};
use fsayolo::model::Model;
use fsayolo::nn::{Cx, Mode};
use fsayolo::postprocess::{decode_all, nms, DetBox};
use fsayolo::train::{train as fit, Hyper};
use fsayolo::ModelConfig;
use fsayolo_tensor::gradcheck::GradCheck;
use fsayolo_tensor::{Tape, Tensor};

use crate::draw::{annotate, gray_levels};
use crate::Failure;

fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    std::fs::write(path, bytes).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

fn nonempty_dataset(dir: &Path) -> Result<Dataset, Failure> {
    if !dir.is_dir() {
        return Err(Failure::input(format!("{}: no such directory", dir.display())));
    }
    let data = load_dataset(dir)?;
    if data.is_empty() {
        return Err(Failure::input(format!("{}: no images under images/", dir.display())));
    }
    Ok(data)
}

fn check_unit(name: &str, v: f32) -> Result<(), Failure> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Failure::input(format!("--{name} must lie in [0, 1], got {v}")))
    }
}

fn with_extension(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(ext);
    PathBuf::from(s)
}

pub fn gen(out: &Path, n: usize, seed: Option<u64>, spec: Option<&Path>) -> Result<(), Failure> {
    let mut spec = match spec {
        Some(p) => SceneSpec::from_text(&read_text(p)?)?,
        None => SceneSpec::default(),
    };
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    if n == 0 {
        return Err(Failure::input("--n must be at least 1"));
    }
    print!("# scene spec\n{}count = {n}\n", spec.to_text());
    generate(&spec, n, out)?;
    println!("wrote {n} scenes to {}", out.display());
    Ok(())
}

pub struct TrainArgs {
    pub data: PathBuf,
    pub config: Option<PathBuf>,
    pub epochs: Option<usize>,
    pub out: PathBuf,
    pub seed: u64,
    pub lr0: Option<f64>,
    pub batch_size: Option<usize>,
    pub val: Option<PathBuf>,
    pub eval_interval: usize,
    pub log: Option<PathBuf>,
}

pub fn train(a: TrainArgs) -> Result<(), Failure> {
    let data = nonempty_dataset(&a.data)?;
    let classes = data.classes.len();
    let config = match &a.config {
        Some(p) => {
            let cfg = ModelConfig::from_text(&read_text(p)?)?;
            if classes > 0 && cfg.num_classes != classes {
                return Err(Failure::input(format!(
                    "{}: num_classes = {} but {} lists {classes} classes",
                    p.display(),
                    cfg.num_classes,
                    a.data.join("classes.txt").display()
                )));
            }
            cfg
        }
        None => ModelConfig::desk_scale(if classes > 0 { classes } else { 3 }),
    };
    let val = a.val.as_deref().map(nonempty_dataset).transpose()?;
    let mut model = Model::new(config, a.seed)?;
    let mut hyper = Hyper::for_model(&model);
    hyper.seed = a.seed;
    hyper.eval_interval = a.eval_interval;
    if let Some(e) = a.epochs {
        hyper.epochs = e;
    }
    if let Some(lr) = a.lr0 {
        hyper.lr0 = lr;
    }
    if let Some(b) = a.batch_size {
        hyper.batch_size = b;
    }
    hyper.validate()?;
    print!("# model\n{}", model.config.to_text());
    println!("parameters = {}", model.parameter_count());
    println!("# training\n{}", serde_json::to_string(&hyper).expect("hyper serializes"));
    println!("images = {}, objects = {}", data.len(), data.num_objects());

    let log_path = a.log.unwrap_or_else(|| with_extension(&a.out, ".jsonl"));
    let mut log = File::create(&log_path).map_err(|e| Failure::input(format!("{}: {e}", log_path.display())))?;
    let mut log_err = None;
    fit(&mut model, &data, &hyper, val.as_ref(), |rec| {
        let m = rec
            .metrics
            .map(|m| format!(" P {:.3} R {:.3} mAP50 {:.3} mAP50-95 {:.3}", m.precision, m.recall, m.map50, m.map5095))
            .unwrap_or_default();
        println!(
            "epoch {:>4} lr {:.5} loss {:.4} (box {:.4} obj {:.4} cls {:.4}){m} {:.1}s",
            rec.epoch, rec.lr, rec.loss.total, rec.loss.box_loss, rec.loss.obj_loss, rec.loss.cls_loss, rec.seconds
        );
        if log_err.is_none() {
            if let Err(e) = writeln!(log, "{}", rec.to_json_line()) {
                log_err = Some(e);
            }
        }
    })?;
    if let Some(e) = log_err {
        return Err(Failure::input(format!("{}: {e}", log_path.display())));
    }
    checkpoint::save(&model, &a.out)?;
    println!("wrote {} and {}", a.out.display(), log_path.display());
    Ok(())
}

pub fn eval(data: &Path, ckpt: &Path, conf: f32, nms_thr: f32, csv: Option<PathBuf>) -> Result<(), Failure> {
    check_unit("conf", conf)?;
    check_unit("nms", nms_thr)?;
    let model = checkpoint::load(ckpt)?;
    let data = nonempty_dataset(data)?;
    print!("# model\n{}", model.config.to_text());
    println!("# eval\nconf = {conf}\nnms = {nms_thr}\niou_match = 0.5");
    let report = evaluate(&model, &data, conf, nms_thr)?;
    println!("{}", report.table_row());
    print!("{}", report.to_kv(&data.classes));
    let csv = csv.unwrap_or_else(|| with_extension(ckpt, ".eval.csv"));
    write_file(&csv, format!("{CSV_HEADER}\n{}\n", report.csv_row()).as_bytes())?;
    println!("wrote {}", csv.display());
    Ok(())
}

/// `class conf cx cy w h` in pixels, one detection per line.
pub fn detection_lines(dets: &[DetBox]) -> String {
    dets.iter()
        .map(|d| format!("{} {:.4} {:.2} {:.2} {:.2} {:.2}\n", d.class_id, d.confidence, d.bbox.cx, d.bbox.cy, d.bbox.w, d.bbox.h))
        .collect()
}

pub fn detect(image: &Path, ckpt: &Path, conf: f32, nms_thr: f32, out: &Path, dump: Option<&Path>) -> Result<(), Failure> {
    check_unit("conf", conf)?;
    check_unit("nms", nms_thr)?;
    let model = checkpoint::load(ckpt)?;
    let img = RgbImage::read(image)?;
    let s = model.config.input_size;
    if img.width != s || img.height != s {
        return Err(Failure::input(format!("{}: image is {}x{}, model expects {s}x{s}", image.display(), img.width, img.height)));
    }
    print!("# model\n{}", model.config.to_text());
    println!("# detect\nconf = {conf}\nnms = {nms_thr}");
    let x = img.to_tensor().reshaped(&[1, 3, s, s]).map_err(fsayolo::Error::from)?;
    let inf = model.infer(&x)?;
    let dets = nms(&decode_all(&inf.heads, 0, &model.config, conf)?, nms_thr);

    let stem = image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
    std::fs::create_dir_all(out).map_err(|e| Failure::input(format!("{}: {e}", out.display())))?;
    let lines = detection_lines(&dets);
    print!("{lines}");
    write_file(&out.join(format!("{stem}.txt")), lines.as_bytes())?;
    annotate(&img, &dets).write(&out.join(format!("{stem}.annotated.ppm")))?;

    if let Some(dir) = dump {
        if inf.attention.is_empty() {
            return Err(Failure::input("model has no attention modules (use_fsa = false)"));
        }
        std::fs::create_dir_all(dir).map_err(|e| Failure::input(format!("{}: {e}", dir.display())))?;
        for (a, stride) in inf.attention.iter().zip(&model.config.strides) {
            let path = dir.join(format!("attention_p{}.ppm", stride.trailing_zeros()));
            attention_image(a).write(&path)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

/// Channel-mean of the first image's attention map as 8-bit gray.
pub fn attention_image(a: &Tensor) -> RgbImage {
    let [_, c, h, w] = a.dims4("attention").expect("attention maps are 4-d");
    let plane = h * w;
    let mean: Vec<f32> = (0..plane)
        .map(|i| (0..c).map(|ch| a.data()[ch * plane + i] as f64).sum::<f64>() as f32 / c as f32)
        .collect();
    let levels = gray_levels(&mean);
    let mut img = RgbImage::new(w, h);
    for (i, v) in levels.into_iter().enumerate() {
        img.put(i % w, i / w, [v; 3]);
    }
    img
}

pub fn gradcheck(seed: u64) -> Result<(), Failure> {
    let cfg = GradCheck::default();
    println!("# gradcheck\nseed = {seed}\nstep = {}\ntolerance = {}", cfg.step, cfg.tolerance);
    let start = Instant::now();
    let reports = full_suite(seed)?;
    for r in &reports {
        println!("{r}");
    }
    let failed = reports.iter().filter(|r| !r.passed()).count();
    println!("{} checks, {failed} failed, {:.1}s", reports.len(), start.elapsed().as_secs_f64());
    if failed > 0 {
        return Err(Failure::check(format!("{failed} gradient checks failed")));
    }
    Ok(())
}

fn median(v: &mut [Duration]) -> Duration {
    v.sort_unstable();
    v[v.len() / 2]
}

pub fn bench(config: Option<&Path>, iters: usize, batch: usize) -> Result<(), Failure> {
    let config = match config {
        Some(p) => ModelConfig::from_text(&read_text(p)?)?,
        None => ModelConfig::default(),
    };
    if iters == 0 || batch == 0 {
        return Err(Failure::input("--iters and --batch must be positive"));
    }
    let model = Model::new(config, 0)?;
    print!("# model\n{}", model.config.to_text());
    println!("# bench\niters = {iters}\nbatch = {batch}\nthreads = {}", rayon::current_num_threads());
    let s = model.config.input_size;
    let x = Tensor::from_fn(&[batch, 3, s, s], |i| (i % 251) as f32 / 250.0);
    let mut totals = Vec::with_capacity(iters);
    let mut sections: Vec<(&'static str, Vec<Duration>)> = Vec::new();
    for _ in 0..iters {
        let mut tape = Tape::with_params(&model.store).no_grad();
        let xv = tape.constant(x.clone()).map_err(fsayolo::Error::from)?;
        let mut cx = Cx::new(&mut tape, Mode::Eval).profiled();
        let start = Instant::now();
        model.forward(&mut cx, xv)?;
        totals.push(start.elapsed());
        for (name, d) in cx.take_timings() {
            match sections.iter_mut().find(|(n, _)| *n == name) {
                Some((_, v)) => v.push(d),
                None => sections.push((name, vec![d])),
            }
        }
    }
    let ms = |d: Duration| d.as_secs_f64() * 1e3;
    println!("forward median {:.2} ms", ms(median(&mut totals)));
    for (name, mut v) in sections {
        println!("  {name:<10} {:>8.2} ms", ms(median(&mut v)));
    }
    Ok(())
}
