use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nerfsup::correspondence::{evaluate_generator, generate_dataset, load_tuples, save_tuples};
use nerfsup::dataio::{load_annotations, load_manifest, save_annotations, save_manifest, write_locked, Dataset};
use nerfsup::descriptor::{describe_all, evaluate_model, train_descriptors, DescriptorModel};
use nerfsup::evalsynth::{analytic_ground_truth, annotate, evaluate_matcher, AnnotatedCorrespondence, EvalResult, FixtureSpec};
use nerfsup::field::RadianceField;
use nerfsup::geometry::{distance_to_z, Pixel};
use nerfsup::optimizer::{append_loss_csv, initial_field, Trainer};
use nerfsup::render::{render_view, save_depth_map};
use nerfsup::{Error, Result};
use serde::Serialize;

use crate::config::FileConfig;
use crate::{Cli, Command, EvalArgs, GenArgs, RenderArgs, SynthArgs, TrainDescArgs, TrainFieldArgs};

const DEFAULT_OUT: &str = "nerfsup-out";

struct Ctx {
    file: FileConfig,
    seed: Option<u64>,
    out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let threads = cli.threads.or(file.threads);
    let ctx = Ctx {
        seed: cli.seed.or(file.seed),
        out: cli.out.clone().or_else(|| file.out.clone()).unwrap_or_else(|| DEFAULT_OUT.into()),
        file,
    };
    fs::create_dir_all(&ctx.out).map_err(|e| Error::Config(format!("cannot create {}: {e}", ctx.out.display())))?;
    match threads {
        Some(0) => Err(Error::Config("--threads must be positive".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(|| dispatch(&ctx, &cli.command)),
        None => dispatch(&ctx, &cli.command),
    }
}

fn dispatch(ctx: &Ctx, command: &Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(ctx, a),
        Command::TrainField(a) => train_field(ctx, a),
        Command::Gen(a) => gen(ctx, a),
        Command::TrainDesc(a) => train_desc(ctx, a),
        Command::Eval(a) => eval(ctx, a),
        Command::Render(a) => render(ctx, a),
    }
}

/// Parameters of a run, saved as `run.json`. Thread count and output
/// directory are left out so that the file is identical across them.
#[derive(Serialize)]
struct RunRecord<'a, P: Serialize> {
    command: &'a str,
    version: &'a str,
    inputs: BTreeMap<&'a str, String>,
    params: P,
}

fn write_run<P: Serialize>(ctx: &Ctx, command: &str, inputs: &[(&'static str, &Path)], params: P) -> Result<()> {
    let record = RunRecord {
        command,
        version: env!("CARGO_PKG_VERSION"),
        inputs: inputs.iter().map(|(k, p)| (*k, p.display().to_string())).collect(),
        params,
    };
    write_locked(&ctx.out.join("run.json"), |w| {
        serde_json::to_writer_pretty(&mut *w, &record)?;
        writeln!(w)
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_locked(path, |w| w.write_all(text.as_bytes()))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Config(format!("cannot create {}: {e}", path.display())))
}

fn fixture_beside(manifest: &Path) -> Result<FixtureSpec> {
    let path = manifest.parent().unwrap_or(Path::new(".")).join("fixture.json");
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Config(format!("{}: {e} (needed for ground truth)", path.display())))?;
    FixtureSpec::from_json(&text)
}

fn synth(ctx: &Ctx, args: &SynthArgs) -> Result<()> {
    let cfg = &ctx.file.synth;
    let cameras = args.cameras.or(cfg.cameras);
    let spec = match &args.spec {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let mut spec = FixtureSpec::from_json(&text)?;
            if let Some(seed) = ctx.seed {
                spec.seed = seed;
            }
            if let Some(n) = cameras {
                spec.rig.count = n;
            }
            spec
        }
        None => {
            let name = args.fixture.as_deref().unwrap_or(&cfg.fixture);
            FixtureSpec::named(name, ctx.seed.unwrap_or(0), cameras)?
        }
    };
    let data = spec.render()?;
    let dataset = Dataset {
        images: data.images,
        bounds: Some(spec.scene.bbox),
    };
    save_manifest(&ctx.out, &dataset)?;
    let depth_dir = ctx.out.join("depth");
    create_dir(&depth_dir)?;
    for (img, depth) in dataset.images.iter().zip(&data.depth) {
        save_depth_map(depth_dir.join(format!("{}.depth", img.id)), img.intr.width, img.intr.height, depth)?;
    }
    write_text(&ctx.out.join("fixture.json"), &(spec.to_json() + "\n"))?;
    let annotations = annotate(&spec.scene, &dataset.images, cfg.annotations, spec.seed)?;
    save_annotations(ctx.out.join("annotations.csv"), &annotations)?;
    let inputs: Vec<(&str, &Path)> = args.spec.iter().map(|p| ("spec", p.as_path())).collect();
    write_run(ctx, "synth", &inputs, &spec)?;
    println!(
        "{}: {} images, {} annotations -> {}",
        spec.name,
        dataset.images.len(),
        annotations.len(),
        ctx.out.display()
    );
    Ok(())
}

fn train_field(ctx: &Ctx, args: &TrainFieldArgs) -> Result<()> {
    let dataset = load_manifest(&args.manifest)?;
    let bounds = dataset
        .bounds
        .ok_or_else(|| Error::Dataset(format!("{} has no bounds", args.manifest.display())))?;
    let mut cfg = ctx.file.train_field.clone();
    cfg.seed = ctx.seed.unwrap_or(cfg.seed);
    cfg.depth_loss_weight = args.lambda_depth.unwrap_or(cfg.depth_loss_weight);
    cfg.samples = args.k_samples.unwrap_or(cfg.samples);
    cfg.iterations = args.iterations.unwrap_or(cfg.iterations);
    cfg.validate()?;

    let field_path = ctx.out.join("field.bin");
    let state_path = ctx.out.join("optimizer.state");
    let loss_path = ctx.out.join("loss.csv");
    let mut trainer = if args.resume {
        let field = RadianceField::load(&field_path)?;
        if field.resolution() != cfg.resolution || field.color_model() != cfg.color_model {
            return Err(Error::Config(format!(
                "{} does not match the configured grid",
                field_path.display()
            )));
        }
        let descent = Trainer::load_state(cfg.rule, &state_path)?;
        Trainer::resume(&dataset.images, cfg.clone(), field, descent)?
    } else {
        if loss_path.exists() {
            fs::remove_file(&loss_path).map_err(|e| Error::Config(format!("{}: {e}", loss_path.display())))?;
        }
        Trainer::new(&dataset.images, cfg.clone(), initial_field(bounds, &cfg)?)?
    };
    let target = match args.stop_after {
        Some(n) => cfg.iterations.min(trainer.steps_taken() as usize + n),
        None => cfg.iterations,
    };
    let mut records = Vec::new();
    while (trainer.steps_taken() as usize) < target {
        records.push(trainer.step()?);
    }
    trainer.field().save(&field_path)?;
    trainer.save_state(&state_path)?;
    append_loss_csv(&loss_path, &records)?;
    write_run(ctx, "train-field", &[("manifest", &args.manifest)], &cfg)?;
    match records.last() {
        Some(r) => println!(
            "step {}/{}: l_photo {:.6} l_depth {:.6}",
            trainer.steps_taken(),
            cfg.iterations,
            r.photo,
            r.depth
        ),
        None => println!("already at step {}", trainer.steps_taken()),
    }
    Ok(())
}

fn gen(ctx: &Ctx, args: &GenArgs) -> Result<()> {
    let dataset = load_manifest(&args.manifest)?;
    let field = RadianceField::load(&args.field)?;
    let mut cfg = ctx.file.gen.clone();
    cfg.seed = ctx.seed.unwrap_or(cfg.seed);
    cfg.method = args.method.unwrap_or(cfg.method);
    cfg.samples = args.k_samples.unwrap_or(cfg.samples);
    cfg.cycle_threshold = args.cycle_threshold.unwrap_or(cfg.cycle_threshold);
    cfg.pairs_per_epoch = args.pairs.unwrap_or(cfg.pairs_per_epoch);
    cfg.samples_per_pair = args.samples_per_pair.unwrap_or(cfg.samples_per_pair);
    if args.no_cycle_check {
        cfg.cycle_check = false;
    }
    let (tuples, report) = generate_dataset(&field, &dataset.images, &cfg)?;
    save_tuples(ctx.out.join("tuples.csv"), &tuples)?;
    write_text(&ctx.out.join("report.txt"), &report.to_string())?;
    write_run(ctx, "gen", &[("manifest", &args.manifest), ("field", &args.field)], &cfg)?;
    print!("{report}");
    Ok(())
}

fn train_desc(ctx: &Ctx, args: &TrainDescArgs) -> Result<()> {
    let dataset = load_manifest(&args.manifest)?;
    let tuples = load_tuples(&args.tuples)?;
    if tuples.is_empty() {
        return Err(Error::Dataset(format!("{} contains no tuples", args.tuples.display())));
    }
    let mut cfg = ctx.file.train_desc.clone();
    cfg.seed = ctx.seed.unwrap_or(cfg.seed);
    cfg.steps = args.steps.unwrap_or(cfg.steps);
    let out = train_descriptors(&tuples, &dataset.images, &cfg)?;
    out.model.save(ctx.out.join("model.bin"))?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in out.losses.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    write_text(&ctx.out.join("loss.csv"), &csv)?;
    write_run(ctx, "train-desc", &[("manifest", &args.manifest), ("tuples", &args.tuples)], &cfg)?;
    if let Some(l) = out.losses.last() {
        println!("{} steps on {} tuples, final loss {l:.6}", out.losses.len(), tuples.len());
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalParams {
    matcher: String,
    annotations: usize,
    seed: u64,
    samples: usize,
}

fn eval(ctx: &Ctx, args: &EvalArgs) -> Result<()> {
    let dataset = load_manifest(&args.manifest)?;
    let cfg = &ctx.file.eval;
    let seed = ctx.seed.unwrap_or(0);
    let samples = args.k_samples.unwrap_or(cfg.samples);
    let annotations: Vec<AnnotatedCorrespondence> = match &args.annotations {
        Some(path) => load_annotations(path)?,
        None => annotate(&fixture_beside(&args.manifest)?.scene, &dataset.images, cfg.annotations, seed)?,
    };
    let mut inputs: Vec<(&str, &Path)> = vec![("manifest", &args.manifest)];
    if let Some(p) = &args.annotations {
        inputs.push(("annotations", p));
    }
    let (label, result): (String, EvalResult) = if let Some(path) = &args.model {
        inputs.push(("model", path));
        let model = DescriptorModel::load(path)?;
        let dir = ctx.out.join("descriptors");
        create_dir(&dir)?;
        for (img, desc) in dataset.images.iter().zip(describe_all(&model, &dataset.images)?) {
            desc.visualize().save(dir.join(format!("{}.png", img.id)))?;
        }
        ("descriptor".into(), evaluate_model(&model, &dataset.images, &annotations)?)
    } else if let Some(path) = &args.field {
        inputs.push(("field", path));
        let field = RadianceField::load(path)?;
        let method = args.method.unwrap_or(ctx.file.gen.method);
        (
            method.tag().into(),
            evaluate_generator(&field, &dataset.images, &annotations, method, samples)?,
        )
    } else if args.oracle {
        let scene = fixture_beside(&args.manifest)?.scene;
        let find = |id: &str| {
            dataset
                .get(id)
                .ok_or_else(|| Error::Dataset(format!("annotation references unknown image {id}")))
        };
        let result = evaluate_matcher(&annotations, |a| {
            let (s, t) = (find(&a.src_id)?, find(&a.tgt_id)?);
            let gt = analytic_ground_truth(&scene, &s.intr, &s.pose, &t.intr, &t.pose, a.u_s)?;
            Ok(gt.and_then(|g| g.best_visible().and_then(|v| v.target)))
        })?;
        ("oracle".into(), result)
    } else {
        return Err(Error::Config("eval needs --model, --field or --oracle".into()));
    };
    write_text(
        &ctx.out.join("eval.csv"),
        &format!("{}\n{}\n", result.csv_header(), result.csv_row(&label)),
    )?;
    let params = EvalParams {
        matcher: label.clone(),
        annotations: annotations.len(),
        seed,
        samples,
    };
    write_run(ctx, "eval", &inputs, &params)?;
    println!("{}\n{}", result.csv_header(), result.csv_row(&label));
    Ok(())
}

#[derive(Serialize)]
struct RenderParams {
    samples: usize,
}

fn render(ctx: &Ctx, args: &RenderArgs) -> Result<()> {
    let dataset = load_manifest(&args.manifest)?;
    let field = RadianceField::load(&args.field)?;
    let samples = args.k_samples.unwrap_or(ctx.file.render.samples);
    let dir = ctx.out.join("renders");
    create_dir(&dir)?;
    let mut csv = String::from("id,psnr\n");
    let mut total = 0.0;
    for img in &dataset.images {
        let view = render_view(&field, &img.intr, &img.pose, samples)?;
        let mut color = view.color.clone();
        color.quantize();
        color.save(dir.join(format!("{}.png", img.id)))?;
        let z: Vec<f64> = view
            .distance
            .iter()
            .enumerate()
            .map(|(i, t)| distance_to_z(&img.intr, Pixel::from_index(i, img.intr.width), *t))
            .collect();
        save_depth_map(dir.join(format!("{}.depth", img.id)), img.intr.width, img.intr.height, &z)?;
        let psnr = nerfsup::evalsynth::psnr(&color, &img.pixels)?;
        total += psnr;
        csv.push_str(&format!("{},{psnr:.4}\n", img.id));
    }
    let mean = total / dataset.images.len().max(1) as f64;
    csv.push_str(&format!("mean,{mean:.4}\n"));
    write_text(&ctx.out.join("psnr.csv"), &csv)?;
    write_run(ctx, "render", &[("manifest", &args.manifest), ("field", &args.field)], RenderParams { samples })?;
    println!("rendered {} views, mean PSNR {mean:.2} dB", dataset.images.len());
    Ok(())
}
