//! End-to-end runs of the `defend` binary and library commands on a tiny model.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use defend_cli::{cmd_attn_map, cmd_eval, cmd_generate_data, cmd_train, AttnArgs, Common, EvalArgs, GenerateArgs, Task, TrainArgs};
use defend_core::checkpoint;
use defend_core::imaging::Image;
use defend_core::trainer::read_loss_log;

const TINY: [&str; 6] = [
    "data.image_size=32",
    "model.encoder.model_dim=16",
    "model.encoder.num_layers=1",
    "model.encoder.text_layers=1",
    "model.decoder.num_layers=1",
    "train.batch_size=8",
];

fn tiny(out: &Path) -> Common {
    Common {
        seed: Some(5),
        preset: Some("desk-smoke".into()),
        set: TINY.iter().map(|s| s.to_string()).collect(),
        ..Common::new(out)
    }
}

fn dataset(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    let a = GenerateArgs { common: Common { seed: Some(5), ..Common::new(&data) }, classes: Some(4), per_class: Some(10), image_size: Some(32) };
    assert_eq!(cmd_generate_data(&a).unwrap().samples, 40);
    data
}

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_defend")).args(args).env_remove("DEFEND_SEED").output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_resume_eval_and_attention_maps() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let out = dir.path().join("train");
    let first = cmd_train(&TrainArgs { common: tiny(&out), data: data.clone(), resume: None, max_steps: Some(3), quiet: true }).unwrap();
    assert_eq!(first.records.len(), 3);
    assert!(out.join("resolved_config.json").exists());
    assert_eq!(checkpoint::read_header(&first.final_checkpoint).unwrap().step, 3);

    let resumed = cmd_train(&TrainArgs {
        common: tiny(&out),
        data: data.clone(),
        resume: Some(first.final_checkpoint.clone()),
        max_steps: Some(5),
        quiet: true,
    })
    .unwrap();
    let steps: Vec<usize> = resumed.records.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![3, 4]);
    let log: Vec<usize> = read_loss_log(&out.join("loss_log.csv")).unwrap().iter().map(|r| r.step).collect();
    assert_eq!(log, vec![0, 1, 2, 3, 4]);
    let header = fs::read_to_string(out.join("loss_log.csv")).unwrap();
    assert_eq!(header.lines().next().unwrap(), "step,phase,cont,pc,desc,total,lr");

    let eval_out = dir.path().join("eval");
    let m = cmd_eval(&EvalArgs { common: Common::new(&eval_out), data: data.clone(), checkpoint: resumed.final_checkpoint.clone(), task: Task::Probe })
        .unwrap();
    let keys: Vec<&String> = m.as_object().unwrap().keys().filter(|k| !["checkpoint", "step"].contains(&k.as_str())).collect();
    assert_eq!(keys, vec!["probe"]);
    assert!(eval_out.join("metrics.json").exists() && eval_out.join("resolved_config.json").exists());

    let attn_out = dir.path().join("attn");
    let ids = vec!["img_00000".to_string(), "img_00011".to_string(), "img_00039".to_string()];
    let paths =
        cmd_attn_map(&AttnArgs { common: Common::new(&attn_out), data: data.clone(), checkpoint: resumed.final_checkpoint, ids }).unwrap();
    assert_eq!(paths.len(), 3);
    for p in &paths {
        let overlay = Image::load_png(p).unwrap();
        let source = Image::load_png(&data.join("images").join(p.file_name().unwrap())).unwrap();
        assert_eq!((overlay.height, overlay.width), (source.height, source.width));
    }
}

#[test]
fn exit_codes_follow_the_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    assert_eq!(bin(&["--help"]).status.code(), Some(0));
    assert_eq!(bin(&["train", "--bogus"]).status.code(), Some(1));

    let few = d.join("few");
    let o = bin(&["generate-data", "--out", s(&few), "--classes", "2"]);
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
    let err: serde_json::Value = serde_json::from_str(&fs::read_to_string(few.join("error.json")).unwrap()).unwrap();
    assert_eq!(err["exit_code"], 1);

    let o = bin(&["generate-data", "--out", s(&d.join("k")), "--set", "train.no_such_key=1"]);
    assert_eq!(o.status.code(), Some(1));

    let o = bin(&["train", "--out", s(&d.join("t")), "--data", s(&d.join("missing"))]);
    assert_eq!(o.status.code(), Some(2));

    let data = dataset(d);
    let mut lines: Vec<String> = fs::read_to_string(data.join("dataset.jsonl")).unwrap().lines().map(String::from).collect();
    let mut bad: serde_json::Value = serde_json::from_str(&lines[1]).unwrap();
    bad.as_object_mut().unwrap().remove("category");
    lines[1] = bad.to_string();
    let file = d.join("records.jsonl");
    fs::write(&file, lines.join("\n")).unwrap();
    let o = bin(&["validate", "--out", s(&d.join("v")), "--input", s(&file)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing field: category"));
    let o = bin(&["validate", "--out", s(&d.join("v2")), "--input", s(&data.join("dataset.jsonl"))]);
    assert_eq!(o.status.code(), Some(0));

    // A checkpoint holding NaN weights is a numeric failure at evaluation.
    let out = d.join("nan");
    let t = cmd_train(&TrainArgs { common: tiny(&out), data: data.clone(), resume: None, max_steps: Some(1), quiet: true }).unwrap();
    let mut c = checkpoint::load(&t.final_checkpoint).unwrap();
    for e in c.model.stores.fem.entries_mut() {
        e.value.fill(f64::NAN);
    }
    let poisoned = d.join("nan.ckpt");
    checkpoint::save(&poisoned, &c.model, 1, None).unwrap();
    let o = bin(&["eval", "--out", s(&d.join("e")), "--data", s(&data), "--checkpoint", s(&poisoned), "--task", "zeroshot"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));

    let o = bin(&["attn-map", "--out", s(&d.join("a")), "--data", s(&data), "--checkpoint", s(&t.final_checkpoint), "--ids", "img_99999"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("img_00000"));
}

#[test]
fn seed_precedence_flag_over_env() {
    let dir = tempfile::tempdir().unwrap();
    let seed_of = |out: &Path| -> u64 {
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("resolved_config.json")).unwrap()).unwrap();
        v["seed"].as_u64().unwrap()
    };
    let run = |name: &str, flag: Option<&str>| -> PathBuf {
        let out = dir.path().join(name);
        let mut args = vec!["generate-data", "--out", s(&out), "--classes", "4", "--per-class", "10", "--image-size", "32"];
        if let Some(f) = flag {
            args.extend(["--seed", f]);
        }
        let o = Command::new(env!("CARGO_BIN_EXE_defend")).args(&args).env("DEFEND_SEED", "21").output().unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        out.to_path_buf()
    };
    assert_eq!(seed_of(&run("env", None)), 21);
    assert_eq!(seed_of(&run("flag", Some("4"))), 4);
}

#[test]
fn untrained_checkpoint_is_near_chance_at_zero_shot() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let out = dir.path().join("init");
    let t = cmd_train(&TrainArgs { common: tiny(&out), data: data.clone(), resume: None, max_steps: Some(0), quiet: true }).unwrap();
    assert_eq!(t.records.len(), 0);
    let m = cmd_eval(&EvalArgs { common: Common::new(dir.path().join("e")), data, checkpoint: t.final_checkpoint, task: Task::Zeroshot }).unwrap();
    let z = &m["zeroshot"];
    // 20 held-out images, chance 1/2: a two-sided 99% interval is roughly [4, 16] correct.
    let correct = z["correct"].as_u64().unwrap();
    assert_eq!(z["n"], 20);
    assert!((4..=16).contains(&correct), "{correct}/20 correct at init");
}
