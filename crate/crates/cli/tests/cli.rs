use std::path::Path;
use std::process::{Command, Output};

fn emoctx(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emoctx")).current_dir(dir).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth(dir: &Path, n: usize) {
    let o = emoctx(dir, &["synth", "--n", &n.to_string(), "--seed", "7", "--image-size", "24x24", "--out", "d/"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

fn write_config(dir: &Path, name: &str, input: &str, epochs: usize) {
    let text = format!(
        "# small run\nprofile = tiny\ninput_size = {input}\ncontext_input_size = {input}\ncorpus = d\nepochs = {epochs}\nbatch_size = 16\n"
    );
    std::fs::write(dir.join(name), text).unwrap();
}

#[test]
fn synth_then_stats_counts_every_person() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), 120);
    let o = emoctx(tmp.path(), &["stats", "d/", "--out", "s"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.lines().any(|l| l == "persons,120"), "{text}");
    for f in ["category_counts.csv", "dimension_counts.csv", "demographics.csv"] {
        assert!(tmp.path().join("s").join(f).exists(), "{f}");
    }
}

#[test]
fn synth_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), 20);
    let a = std::fs::read(tmp.path().join("d/manifest.jsonl")).unwrap();
    std::fs::rename(tmp.path().join("d"), tmp.path().join("first")).unwrap();
    synth(tmp.path(), 20);
    assert_eq!(a, std::fs::read(tmp.path().join("d/manifest.jsonl")).unwrap());
}

#[test]
fn analysis_commands_write_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    let o = emoctx(p, &["synth", "--n", "60", "--annotators", "3", "--annotator-noise", "0.1", "--image-size", "24x24", "--out", "d"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(emoctx(p, &["agreement", "d", "--out", "a"]).status.success());
    assert!(p.join("a/kappa.csv").exists());
    assert!(emoctx(p, &["cooccur", "d", "--split", "train", "--out", "c"]).status.success());
    assert!(p.join("c/cooccurrence.csv").exists());
    assert!(emoctx(p, &["cluster", "d", "--k", "2", "--out", "k"]).status.success());
    assert!(p.join("k/clusters.csv").exists());
    std::fs::write(p.join("tags.csv"), "image_id,tag\nimg000000,indoor\nimg000001,outdoor\n").unwrap();
    let o = emoctx(p, &["crosstab", "d", "--tags", "tags.csv", "--out", "x"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(p.join("x/crosstab.csv").exists());
}

#[test]
fn train_logs_one_row_per_epoch_and_eval_reads_the_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    synth(p, 60);
    write_config(p, "run.cfg", "16x16", 2);
    let o = emoctx(p, &["train", "--config", "run.cfg", "--out", "ck"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = std::fs::read_to_string(p.join("ck/log.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "epoch,train_loss_disc,train_loss_cont,val_mAP,val_AAE");
    assert_eq!(lines.len(), 3);

    let o = emoctx(p, &["eval", "--config", "run.cfg", "--checkpoint", "ck/best.ckpt", "--out", "ev"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(p.join("ev/ap.csv").exists() && p.join("ev/samples.csv").exists());
}

#[test]
fn eval_rejects_a_checkpoint_from_another_backbone() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    synth(p, 60);
    write_config(p, "run.cfg", "16x16", 1);
    assert!(emoctx(p, &["train", "--config", "run.cfg", "--out", "ck"]).status.success());
    write_config(p, "other.cfg", "24x24", 1);
    let o = emoctx(p, &["eval", "--config", "other.cfg", "--checkpoint", "ck/last.ckpt", "--out", "ev"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("input_size"), "{}", stderr(&o));
}

#[test]
fn usage_and_user_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    assert_eq!(emoctx(p, &["frobnicate"]).status.code(), Some(1));
    assert_eq!(emoctx(p, &["stats", "missing"]).status.code(), Some(1));
    assert_eq!(emoctx(p, &["synth", "--n", "0", "--out", "d"]).status.code(), Some(1));
    std::fs::write(p.join("bad.cfg"), "epochs = 3\nbogus = 1\n").unwrap();
    let o = emoctx(p, &["train", "--config", "bad.cfg", "--out", "ck"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bogus"));
    assert_eq!(emoctx(p, &["--help"]).status.code(), Some(0));
}
