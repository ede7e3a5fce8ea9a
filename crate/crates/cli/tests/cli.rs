use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

use vig_core::bench::{read_csv, CSV_HEADER};
use vig_core::train::SyntheticTask;
use vig_core::{ppm, weights};

fn vig(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vig")).args(args).output().expect("spawn vig")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("vig-cli-{name}-{}", std::process::id()));
    fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn flops_prints_each_variant() {
    let o = vig(&["flops", "--seq", "196", "--dim", "192"]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.contains("bigla 37330944\n"), "{out}");
    // 4·196·192² + 2·196²·192
    assert!(out.contains("softmax 43653120\n"), "{out}");
    assert!(out.lines().any(|l| l.starts_with("gla ")));
    assert!(out.lines().any(|l| l.starts_with("gla_vim ")));
}

#[test]
fn params_total_for_tiny_preset() {
    let o = vig(&["params", "--config", "vig-t"]);
    assert!(o.status.success());
    let out = stdout(&o);
    let total = out.lines().find(|l| l.starts_with("total")).unwrap();
    assert!(total.contains("6024040"), "{total}");
}

#[test]
fn unknown_flag_exits_2() {
    let o = vig(&["flops", "--seq", "4", "--dim", "4", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(vig(&["params", "--config", "vig-xl"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_1() {
    assert_eq!(vig(&["flops", "--seq", "0", "--dim", "4"]).status.code(), Some(1));
    let o = vig(&["infer", "--weights", "/nonexistent.vigw", "--image", "/nonexistent.ppm"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn help_lists_subcommands() {
    let o = vig(&["--help"]);
    assert!(o.status.success());
    let out = stdout(&o);
    for cmd in ["check", "flops", "params", "bench", "train", "infer"] {
        assert!(out.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn bench_writes_cost_csv() {
    let dir = scratch("bench");
    let csv = dir.join("cost.csv");
    let o = vig(&[
        "bench", "--variants", "bigla,softmax", "--seq-lens", "16,32", "--dim", "8", "--csv", csv.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().next().unwrap(), CSV_HEADER);
    let rows = read_csv(text.as_bytes()).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.wall_ms_min <= r.wall_ms_median && r.peak_mem_bytes > 0));
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn bench_rejects_fewer_than_three_repeats() {
    let o = vig(&["bench", "--seq-lens", "16", "--dim", "8", "--repeats", "2"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_save_then_infer() {
    let dir = scratch("train");
    let model = dir.join("m.vigw");
    let metrics = dir.join("metrics.csv");
    let o = vig(&[
        "train", "--task", "bars", "--steps", "4", "--eval-every", "2", "--batch-size", "2",
        "--save", model.to_str().unwrap(), "--metrics", metrics.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(&metrics).unwrap().lines().count(), 5);
    let (config, _) = weights::load(&model).unwrap();

    let (img, _) = SyntheticTask::bars(0).sample(0);
    assert_eq!(img.shape()[..2], [config.image_height, config.image_width]);
    let image = dir.join("x.ppm");
    ppm::save(&image, &img).unwrap();
    let o = vig(&["infer", "--weights", model.to_str().unwrap(), "--image", image.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    let logits = out.lines().find_map(|l| l.strip_prefix("logits ")).unwrap();
    assert_eq!(logits.split(' ').count(), config.num_classes);
    let class: usize = out.lines().find_map(|l| l.strip_prefix("class ")).unwrap().parse().unwrap();
    assert!(class < config.num_classes);
    fs::remove_dir_all(&dir).unwrap();
}
