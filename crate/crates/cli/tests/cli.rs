use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

use onloadrt_core::profiler::ProfileDB;
use onloadrt_core::Tensor;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_onloadrt"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = run(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        let ws = Self { dir: tempfile::tempdir().unwrap() };
        ok(&["init-model", "--seed", "1", "--model", &ws.s("m.txt"), "--weights", &ws.s("w.bin")]);
        ws
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).to_str().unwrap().to_string()
    }

    fn profile(&self, out: &str, seed: &str) {
        ok(&[
            "profile", "--model", &self.s("m.txt"), "--weights", &self.s("w.bin"), "--seed", seed, "--count", "8",
            "--out", &self.s(out),
        ]);
    }
}

fn csv_rows(text: &str) -> Vec<Vec<String>> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(header[0], "schema");
    lines
        .map(|l| {
            let row: Vec<String> = l.split(',').map(str::to_string).collect();
            assert_eq!(row.len(), header.len());
            assert_eq!(row[0], "onloadrt-sweep-v1");
            row
        })
        .collect()
}

fn variant<'a>(rows: &'a [Vec<String>], name: &'a str) -> impl Iterator<Item = &'a Vec<String>> + 'a {
    rows.iter().filter(move |r| r[3] == name)
}

fn num(row: &[String], col: usize) -> f64 {
    row[col].parse().unwrap()
}

const THROUGHPUT: usize = 8;
const DEVICE: usize = 10;
const SAVINGS: usize = 13;

#[test]
fn profile_reloads_byte_identically() {
    let ws = Workspace::new();
    ws.profile("p.olpf", "2");
    let bytes = fs::read(ws.path("p.olpf")).unwrap();
    assert_eq!(ProfileDB::load(&ws.path("p.olpf")).unwrap().to_bytes(), bytes);
}

#[test]
fn profile_rerun_keeps_size_and_accuracy_tables() {
    let ws = Workspace::new();
    ws.profile("a.olpf", "5");
    ws.profile("b.olpf", "5");
    let a = ProfileDB::load(&ws.path("a.olpf")).unwrap();
    let b = ProfileDB::load(&ws.path("b.olpf")).unwrap();
    let tables = |p: &ProfileDB| -> Vec<(f64, f64)> { p.configs().map(|(_, _, e)| (e.dep_bytes, e.acc_delta)).collect() };
    assert_eq!(tables(&a), tables(&b));
}

#[test]
fn missing_weights_names_the_path() {
    let ws = Workspace::new();
    let missing = ws.s("nowhere.bin");
    let err = fails(&["profile", "--model", &ws.s("m.txt"), "--weights", &missing, "--seed", "1", "--out", &ws.s("p")]);
    assert!(err.contains(&missing), "{err}");
}

#[test]
fn sparse_tensor_packs_twenty_fold_and_round_trips() {
    let ws = Workspace::new();
    ok(&["init-tensor", "--seed", "3", "--zeros", "0.9", "--shape", "64,32,32", "--out", &ws.s("t.oltn")]);
    let out = ok(&["pack", "--input", &ws.s("t.oltn"), "--bitwidth", "4", "--out", &ws.s("t.ispm")]);
    let ratio: f64 = out.split("ratio ").nth(1).unwrap().split(',').next().unwrap().parse().unwrap();
    assert!(ratio >= 20.0, "{out}");
    ok(&["unpack", "--input", &ws.s("t.ispm"), "--out", &ws.s("u.oltn")]);
    let read = |p: &Path| Tensor::read_from(fs::File::open(p).unwrap()).unwrap();
    let (orig, back) = (read(&ws.path("t.oltn")), read(&ws.path("u.oltn")));
    let (min, max) = orig.min_max();
    let bound = onloadrt_core::ispm::error_bound(min, max, 4) + 1e-6;
    assert!((back.max_abs_diff(&orig) as f64) <= bound);
}

#[test]
fn dense_tensor_falls_back_to_store() {
    let ws = Workspace::new();
    ok(&["init-tensor", "--seed", "4", "--kind", "uniform", "--shape", "4096", "--out", &ws.s("d.oltn")]);
    let out = ok(&["pack", "--input", &ws.s("d.oltn"), "--bitwidth", "16", "--out", &ws.s("d.ispm")]);
    assert!(out.contains("codec none"), "{out}");
    // Raw 16-bit codes plus a rank-1 record header.
    assert_eq!(fs::metadata(ws.path("d.ispm")).unwrap().len(), 4096 * 2 + 37);
}

#[test]
fn truncated_record_is_corrupt() {
    let ws = Workspace::new();
    ok(&["init-tensor", "--seed", "3", "--shape", "16,16", "--out", &ws.s("t.oltn")]);
    ok(&["pack", "--input", &ws.s("t.oltn"), "--bitwidth", "8", "--out", &ws.s("t.ispm")]);
    let bytes = fs::read(ws.path("t.ispm")).unwrap();
    fs::write(ws.path("cut.ispm"), &bytes[..bytes.len() - 3]).unwrap();
    let err = fails(&["unpack", "--input", &ws.s("cut.ispm"), "--out", &ws.s("x.oltn")]);
    assert!(err.contains("corrupt payload"), "{err}");
    assert!(err.contains("cut.ispm"), "{err}");
}

#[test]
fn deadline_sweep_onloads_monotonically() {
    let ws = Workspace::new();
    ws.profile("p.olpf", "2");
    let csv = ok(&[
        "sweep", "--profile", &ws.s("p.olpf"), "--axis", "deadline", "--points", "2,4,6,8,10,12,14,16,20,40",
        "--link", "wifi", "--client-slowdown", "4", "--hard", "accuracy<=1pp", "--soft", "min:server_cost",
        "--unpipelined",
    ]);
    let rows = csv_rows(&csv);
    assert_eq!(rows.len(), 40);
    let savings: Vec<f64> = variant(&rows, "dyno").map(|r| num(r, SAVINGS)).collect();
    assert!(savings.windows(2).all(|w| w[0] <= w[1]), "{savings:?}");
    assert_eq!(*savings.last().unwrap(), 100.0);
}

#[test]
fn bandwidth_sweep_dominates_the_baseline() {
    let ws = Workspace::new();
    ws.profile("p.olpf", "2");
    let config = ws.path("sweep.toml");
    fs::write(
        &config,
        format!(
            "profile = {:?}\naxis = \"bandwidth\"\npoints = [0.1, 1.0, 10.0, 100.0]\nlink = \"wifi\"\n\
             client_slowdown = 4.0\nhard = [\"accuracy<=1pp\"]\nsoft = [\"max:throughput\"]\noutput = {:?}\n",
            ws.s("p.olpf"),
            ws.s("sweep.csv")
        ),
    )
    .unwrap();
    ok(&["sweep", "--config", config.to_str().unwrap()]);
    let rows = csv_rows(&fs::read_to_string(ws.path("sweep.csv")).unwrap());
    let dyno: Vec<f64> = variant(&rows, "dyno").map(|r| num(r, THROUGHPUT)).collect();
    let base: Vec<f64> = variant(&rows, "neurosurgeon").map(|r| num(r, THROUGHPUT)).collect();
    assert_eq!(dyno.len(), 4);
    assert!(dyno.iter().zip(&base).all(|(d, b)| d >= b), "{dyno:?} vs {base:?}");
    let client_only: Vec<(String, f64, f64)> = variant(&rows, "client-only")
        .map(|r| (r[4].clone(), num(r, THROUGHPUT), num(r, DEVICE)))
        .collect();
    assert!(client_only.windows(2).all(|w| w[0] == w[1]), "{client_only:?}");
}

#[test]
fn sweep_without_profile_fails() {
    let ws = Workspace::new();
    let missing = ws.s("absent.olpf");
    let err = fails(&["sweep", "--profile", &missing, "--axis", "bandwidth", "--points", "1"]);
    assert!(err.contains(&missing), "{err}");
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn start_server(ws: &Workspace) -> (Server, String) {
    let mut child = bin()
        .args(["serve", "--model", &ws.s("m.txt"), "--weights", &ws.s("w.bin"), "--listen", "127.0.0.1:0"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("serving on ").expect("server announces its address").to_string();
    (Server(child), addr)
}

#[test]
fn serve_and_infer_end_to_end() {
    let ws = Workspace::new();
    ws.profile("p.olpf", "2");
    let (_server, addr) = start_server(&ws);
    let m = ws.s("m.txt");
    let w = ws.s("w.bin");
    let common = ["--model", &m, "--weights", &w, "--connect", &addr, "--seed", "7", "--count", "3"];

    let fixed = ok(&[&["infer"], &common[..], &["--split", "0", "--link", "wifi"]].concat());
    let full = ok(&[&["infer"], &common[..], &["--split", "15"]].concat());
    let top1 = |text: &str| -> Vec<String> {
        text.lines()
            .filter(|l| l.starts_with('#'))
            .map(|l| l.split_whitespace().nth(1).unwrap().to_string())
            .collect()
    };
    assert_eq!(top1(&fixed).len(), 3);
    assert_eq!(top1(&fixed), top1(&full));

    let p = ws.s("p.olpf");
    let adaptive = ok(&[&["infer"], &common[..], &["--profile", &p, "--hard", "accuracy<=1pp"]].concat());
    assert_eq!(top1(&adaptive), top1(&full));

    let piped = ok(&[&["run-pipelined"], &common[..], &["--split", "4", "--bitwidth", "8", "--warmup", "1"]].concat());
    assert!(piped.contains("throughput="), "{piped}");
    assert!(piped.contains("occupancy"), "{piped}");
}
