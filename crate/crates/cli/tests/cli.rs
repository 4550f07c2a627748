use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
epochs = 2
lr = 1e-3
lr_drop_epoch = 1
n_train = 16
n_val = 4
batch_size = 8
n_classes = 3
d_model = 16
ffn_dim = 16
layers = 2
queries = 6
grid = 4
max_objects = 3
";

fn dndetr(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dndetr"));
    cmd.args(args).env_remove("DN_SEED");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("small.toml");
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn train_eval_and_refuse_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();

    let o = dndetr(&["train", "--config", &cfg, "--out", out_s], &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("epoch   2"));
    for f in ["metrics.csv", "config.toml", "final.ckpt"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("epoch,mean_IS,AP50,mean_ap,"));
    assert_eq!(csv.lines().count(), 3);

    let again = dndetr(&["train", "--config", &cfg, "--out", out_s], &[]);
    assert!(!again.status.success());
    assert!(String::from_utf8_lossy(&again.stderr).contains("refusing to overwrite"));
    let forced = dndetr(&["train", "--config", &cfg, "--out", out_s, "--force"], &[]);
    assert!(forced.status.success());
    assert_eq!(std::fs::read_to_string(out.join("metrics.csv")).unwrap(), csv);

    let ckpt = out.join("final.ckpt");
    let e = dndetr(&["eval", "--checkpoint", ckpt.to_str().unwrap()], &[]);
    assert!(e.status.success());
    assert!(stdout(&e).contains("scenes 4  AP50"));
}

#[test]
fn seed_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{SMALL}seed = 3\n"));
    let run = |sub: &str, extra: &[&str], envs: &[(&str, &str)]| {
        let out = dir.path().join(sub);
        let mut args = vec!["train", "--config", &cfg, "--out", out.to_str().unwrap()];
        args.extend_from_slice(extra);
        let o = dndetr(&args, envs);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read_to_string(out.join("config.toml")).unwrap()
    };
    assert!(run("file", &[], &[]).contains("seed = 3\n"));
    assert!(run("env", &[], &[("DN_SEED", "11")]).contains("seed = 11\n"));
    assert!(run("flag", &["--seed", "5"], &[("DN_SEED", "11")]).contains("seed = 5\n"));
}

#[test]
fn overrides_reach_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("nomask");
    let o = dndetr(
        &["train", "--config", &cfg, "--dn-groups", "1", "--no-mask", "--out", out.to_str().unwrap()],
        &[],
    );
    assert!(o.status.success());
    let written = std::fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(written.contains("dn_groups = 1\n"));
    assert!(written.contains("attention_mask = false\n"));
}

#[test]
fn rejects_unknown_config_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "epochz = 3\n");
    let o = dndetr(&["train", "--config", &cfg, "--out", dir.path().join("x").to_str().unwrap()], &[]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("epochz"));
}

#[test]
fn instability_table_and_ablation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let abl = dir.path().join("abl");
    let o = dndetr(&["ablate", "--sweep", "groups", "--config", &cfg, "--out", abl.to_str().unwrap()], &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    for label in ["groups_0", "groups_1", "groups_5"] {
        assert!(text.contains(label));
    }

    let a = abl.join("groups_0");
    let b = abl.join("groups_5");
    let t = dndetr(
        &["instability", "--run-dir", a.to_str().unwrap(), "--run-dir", b.to_str().unwrap()],
        &[],
    );
    assert!(t.status.success());
    let lines: Vec<String> = stdout(&t).lines().map(String::from).collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("1\t-\t-"));
    assert!(lines[3].starts_with("mean\t"));

    let bad = dndetr(&["ablate", "--sweep", "width", "--config", &cfg], &[]);
    assert!(!bad.status.success());
}
