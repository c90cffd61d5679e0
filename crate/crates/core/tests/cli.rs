mod common;

use std::path::Path;
use std::process::{Command, Output};

use hybrid_sds::io::checkpoint::load_checkpoint;
use hybrid_sds::io::export::read_manifest;

fn hybrid_sds(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hybrid-sds"))
        .args(args)
        .current_dir(dir)
        .env_remove("HYBRID_SDS_GUIDANCE")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout {}\nstderr {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn generate_resume_render_eval() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::small_run_config(21);
    cfg.eval.frames = 4;
    cfg.eval.resolution = (8, 6);
    cfg.eval.samples_per_ray = 8;
    std::fs::write(dir.path().join("run.cfg"), cfg.to_text()).unwrap();

    let out = hybrid_sds(&["generate", "run.cfg", "--output", "run", "--stop-at", "10"], dir.path());
    assert!(ok(&out).contains("at iteration 10"));
    let ckpt = dir.path().join("run/checkpoint.ckpt");
    assert!(ckpt.exists());
    assert!(!dir.path().join("run/frames").exists());

    let out = hybrid_sds(&["resume", "run/checkpoint.ckpt"], dir.path());
    assert!(ok(&out).contains("at iteration 36"));
    assert_eq!(read_manifest(&dir.path().join("run/frames")).unwrap().frames.len(), 4);
    let log = std::fs::read_to_string(dir.path().join("run/log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 36);

    // The CLI run and an in-process run of the same config agree bitwise.
    let mut session = hybrid_sds::io::session::Session::new({
        let mut c = cfg.clone();
        c.output_dir = "run".into();
        c
    })
    .unwrap();
    session.run_until(u64::MAX, None, &mut |_| {}).unwrap();
    assert_eq!(load_checkpoint(&ckpt).unwrap(), session.checkpoint());

    let out = hybrid_sds(&["render", "run/checkpoint.ckpt", "--frames", "3", "--output", "still"], dir.path());
    assert!(ok(&out).contains("wrote 3 frames"));
    assert_eq!(read_manifest(&dir.path().join("still")).unwrap().frames.len(), 3);

    let out = hybrid_sds(&["eval", "run/checkpoint.ckpt", "--frames", "2", "--embedder", "hash"], dir.path());
    let line = ok(&out);
    let score: f64 = line.trim().strip_prefix("clip_score ").unwrap().parse().unwrap();
    assert!((0.0..=100.0).contains(&score));
}

#[test]
fn bad_config_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.cfg"), "stages.p_3d = 2\n").unwrap();
    let out = hybrid_sds(&["generate", "bad.cfg"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn missing_checkpoint_exits_with_io_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = hybrid_sds(&["render", "nope.ckpt"], dir.path());
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn unreachable_guidance_exits_with_guidance_code() {
    let dir = tempfile::tempdir().unwrap();
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    drop(listener);
    std::fs::write(dir.path().join("run.cfg"), common::small_run_config(1).to_text()).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_hybrid-sds"))
        .args(["generate", "run.cfg"])
        .current_dir(dir.path())
        .env("HYBRID_SDS_GUIDANCE", format!("tcp://{addr}"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}
