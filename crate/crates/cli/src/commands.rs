use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use home_equiv_core::data::Dataset;
use home_equiv_core::models::encode;
use home_equiv_core::selfcheck::run_selfcheck;
use home_equiv_core::tensor::Primitive;
use home_equiv_core::trainer::{evaluate, Checkpoint, Task, TrainConfig, Trainer};
use home_equiv_core::vn::vn_forward;
use home_equiv_core::{Error, Result};
use serde_json::json;

use crate::config::FileConfig;
use crate::{EmbedArgs, EvalArgs, GenArgs, PretrainArgs, SelfcheckArgs, TrainArgs, TrainFlags};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn print_config(command: &str, body: serde_json::Value) {
    println!("config {}", json!({ "command": command, "resolved": body }));
}

fn threads() -> Result<usize> {
    match std::env::var("HOME_EQUIV_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::BadConfig(format!(
                "HOME_EQUIV_THREADS must be a positive integer, got {v:?}"
            ))),
        },
    }
}

pub fn gen(config: Option<&Path>, a: GenArgs) -> Result<u8> {
    let mut cfg = FileConfig::load(config)?.dataset()?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(c) = a.count {
        cfg.count = c;
    }
    if let Some((w, h)) = a.size {
        cfg.width = w;
        cfg.height = h;
    }
    if let Some(v) = a.views {
        cfg.views = v;
    }
    if let Some(c) = a.classes {
        cfg.classes = c;
    }
    print_config("gen", json!({ "out": a.out, "data": cfg }));
    let ds = Dataset::generate(&cfg)?;
    ds.save(&a.out)?;
    println!(
        "manifest {}",
        a.out.join(home_equiv_core::data::MANIFEST_FILE).display()
    );
    for v in &ds.manifest.views[1..] {
        let p = &v.params;
        println!(
            "view {} sx={} sy={} tx={} ty={} theta_deg={}",
            v.name, p.sx, p.sy, p.tx, p.ty, p.theta_deg
        );
    }
    Ok(0)
}

fn apply_common(cfg: &mut TrainConfig, f: &TrainFlags) {
    if let Some(v) = f.seed {
        cfg.seed = v;
    }
    if let Some(v) = f.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = f.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = f.lr_start {
        cfg.lr_start = v;
    }
    if let Some(v) = f.lr_end {
        cfg.lr_end = v;
    }
    if let Some(v) = f.n_dim {
        cfg.n_dim = v;
    }
}

fn metrics_path(f: &TrainFlags) -> PathBuf {
    f.metrics.clone().unwrap_or_else(|| {
        let mut s = f.out.clone().into_os_string();
        s.push(".metrics.jsonl");
        PathBuf::from(s)
    })
}

/// Runs `trainer` to completion (or `stop_after`), streaming metrics, then
/// writes the checkpoint.
fn drive(mut trainer: Trainer<'_>, f: &TrainFlags, append: bool) -> Result<u8> {
    let path = metrics_path(f);
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&path)
        .map_err(io_err(&path))?;
    let mut log = BufWriter::new(file);
    let mut write_err = None;
    trainer.run(f.stop_after, |m| {
        eprintln!(
            "epoch {:>4} lr {:.3e} train_loss {:.6} val_loss {:.6}{}",
            m.epoch,
            m.lr,
            m.train_loss,
            m.val_loss,
            m.val_acc
                .map(|a| format!(" val_acc {a:.4}"))
                .unwrap_or_default()
        );
        if write_err.is_none() {
            write_err = writeln!(log, "{}", m.to_json_line()).err();
        }
    })?;
    if let Some(e) = write_err {
        return Err(io_err(&path)(e));
    }
    log.flush().map_err(io_err(&path))?;
    trainer.checkpoint().save(&f.out)?;
    println!("checkpoint {}", f.out.display());
    println!("metrics {}", path.display());
    println!(
        "epochs {}/{}{}",
        trainer.epoch(),
        trainer.total_epochs(),
        if trainer.is_done() {
            ""
        } else {
            " (stopped early; resume with --resume)"
        }
    );
    Ok(0)
}

pub fn pretrain(config: Option<&Path>, a: PretrainArgs) -> Result<u8> {
    let mut cfg = FileConfig::load(config)?.train()?;
    apply_common(&mut cfg, &a.common);
    if a.no_vn {
        cfg.vn = false;
    }
    cfg.validate()?;
    let task = if a.supervised_aux {
        Task::SupervisedAux
    } else {
        Task::Pretrain
    };
    print_config(
        "pretrain",
        json!({ "task": task.name(), "data": a.common.data, "out": a.common.out, "train": cfg }),
    );
    let loaded = Dataset::load(&a.common.data)?;
    let ds = if a.supervised_aux {
        loaded.auxiliary()?
    } else {
        loaded
    };
    start(task, &ds, &cfg, None, &a.common)
}

fn start(
    task: Task,
    ds: &Dataset,
    cfg: &TrainConfig,
    from: Option<&Checkpoint>,
    f: &TrainFlags,
) -> Result<u8> {
    match &f.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            drive(Trainer::resume(task, ds, cfg, &ck)?, f, true)
        }
        None => drive(Trainer::new(task, ds, cfg, from)?, f, false),
    }
}

pub fn train(config: Option<&Path>, a: TrainArgs) -> Result<u8> {
    let mut cfg = FileConfig::load(config)?.train()?;
    apply_common(&mut cfg, &a.common);
    if let Some(r) = a.regime {
        cfg.regime = r;
    }
    if let Some(v) = a.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = a.finetune_epochs {
        cfg.finetune_epochs = v;
    }
    if let Some(v) = a.finetune_lr {
        cfg.finetune_lr = v;
    }
    if a.all_views {
        cfg.all_views = true;
    }
    cfg.validate()?;
    let source = match (&a.from, a.random_encoder) {
        (Some(p), _) => json!(p),
        (None, true) => json!("random"),
        (None, false) => serde_json::Value::Null,
    };
    print_config(
        "train",
        json!({ "data": a.common.data, "out": a.common.out, "from": source, "train": cfg }),
    );
    let ds = Dataset::load(&a.common.data)?;
    let from = match (&a.from, a.random_encoder) {
        (Some(p), _) => Some(Checkpoint::load(p)?),
        (None, true) => Some(Checkpoint::random(&ds, &cfg)?),
        (None, false) => None,
    };
    if a.common.resume.is_none() && cfg.regime.needs_checkpoint() && from.is_none() {
        return Err(Error::MissingCheckpoint(format!(
            "regime {} needs --from CKPT or --random-encoder",
            cfg.regime
        )));
    }
    start(Task::Train(cfg.regime), &ds, &cfg, from.as_ref(), &a.common)
}

pub fn eval(a: EvalArgs) -> Result<u8> {
    let threads = threads()?;
    print_config(
        "eval",
        json!({ "ckpt": a.ckpt, "data": a.data, "split": a.split.name(), "threads": threads }),
    );
    let model = Checkpoint::load(&a.ckpt)?.model()?;
    let ds = Dataset::load(&a.data)?;
    let ev = evaluate(&model, &ds, a.split, threads)?;
    println!("accuracy={:.4}", ev.accuracy);
    println!("correct={} total={}", ev.correct, ev.total);
    for (k, row) in ev.confusion.iter().enumerate() {
        let name = ds.manifest.classes.get(k).map_or("?", String::as_str);
        let cells: Vec<String> = row.iter().map(usize::to_string).collect();
        println!("confusion {name} {}", cells.join(" "));
    }
    Ok(0)
}

/// One row per (sample, view): the view's representation, and its first
/// neighbor's representation carried over by the edge homography.
pub fn embed(a: EmbedArgs) -> Result<u8> {
    print_config(
        "embed",
        json!({ "ckpt": a.ckpt, "data": a.data, "out": a.out, "split": a.split.map(|s| s.name()) }),
    );
    let model = Checkpoint::load(&a.ckpt)?.model()?;
    let ds = Dataset::load(&a.data)?;
    let n = model.n_dim();
    let n_views = ds.n_views();
    let tmp = a.out.with_extension("csv.tmp");
    let file = File::create(&tmp).map_err(io_err(&tmp))?;
    let mut w = BufWriter::new(file);
    let mut header = vec!["sample_id".to_string(), "view".to_string()];
    for prefix in ["", "h_"] {
        for r in 0..n {
            for c in ["x", "y", "z"] {
                header.push(format!("{prefix}v{r}_{c}"));
            }
        }
    }
    writeln!(w, "{}", header.join(",")).map_err(io_err(&tmp))?;
    let mut rows = 0usize;
    for (i, sample) in ds.samples.iter().enumerate() {
        if a.split.is_some_and(|s| ds.manifest.samples[i].split != s) {
            continue;
        }
        let reps = sample
            .views
            .iter()
            .map(|img| vn_forward(&model.vn, &encode(&model.encoder, img)?))
            .collect::<Result<Vec<_>>>()?;
        for v in 0..n_views {
            let j = *ds
                .graph
                .neighbors(v)
                .iter()
                .next()
                .expect("connected chain");
            let moved = reps[j].act(ds.graph.h(j, v).expect("edge").matrix());
            let mut line = format!("{i},{}", ds.manifest.views[v].name);
            for x in reps[v].tensor().data().iter().chain(moved.tensor().data()) {
                line.push(',');
                line.push_str(&x.to_string());
            }
            writeln!(w, "{line}").map_err(io_err(&tmp))?;
            rows += 1;
        }
    }
    w.flush().map_err(io_err(&tmp))?;
    drop(w);
    std::fs::rename(&tmp, &a.out).map_err(io_err(&a.out))?;
    println!("rows {rows}");
    println!("embeddings {}", a.out.display());
    Ok(0)
}

pub fn selfcheck(a: SelfcheckArgs) -> Result<u8> {
    let fault = match &a.inject_fault {
        None => None,
        Some(name) => Some(
            Primitive::from_name(name)
                .ok_or_else(|| Error::BadConfig(format!("unknown primitive {name:?}")))?,
        ),
    };
    print_config("selfcheck", json!({ "inject_fault": a.inject_fault }));
    let results = run_selfcheck(fault);
    let failed = results.iter().filter(|r| !r.passed).count();
    for r in &results {
        println!("{}", r.line());
    }
    println!("{} checks, {failed} failed", results.len());
    Ok(u8::from(failed > 0))
}
