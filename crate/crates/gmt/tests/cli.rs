use std::io::{BufRead, BufReader};
use std::process::{Child, Command, Output, Stdio};

const BIN: &str = env!("CARGO_BIN_EXE_edgrid");

fn edgrid(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("EDGRID_CONFIG").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn demo_prints_three_correct() {
    let o = edgrid(&["demo"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("3/3 correct"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(edgrid(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(edgrid(&[]).status.code(), Some(1));
    assert_eq!(edgrid(&["tier", "alloc", "--node", "n", "--kind", "nope"]).status.code(), Some(1));
    assert_eq!(edgrid(&["--help"]).status.code(), Some(0));
    assert_eq!(edgrid(&["--version"]).status.code(), Some(0));
}

#[test]
fn serve_config_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.config");
    assert_eq!(edgrid(&["serve", "--config", missing.to_str().unwrap()]).status.code(), Some(2));
    let wrong = dir.path().join("grid.txt");
    std::fs::write(&wrong, "a=1").unwrap();
    let o = edgrid(&["serve", "--config", wrong.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains(".config"));
    assert_eq!(edgrid(&["serve"]).status.code(), Some(2));

    // The environment variable wins over the flag.
    let good = dir.path().join("good.config");
    std::fs::write(&good, "gmt.bind=127.0.0.1:0\n").unwrap();
    let o = Command::new(BIN)
        .args(["serve", "--config", good.to_str().unwrap()])
        .env("EDGRID_CONFIG", &missing)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.config"));
}

#[test]
fn client_without_daemon_exits_two() {
    let o = Command::new(BIN)
        .args(["node", "start", "node-1", "--server", "http://127.0.0.1:9"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

struct Daemon {
    child: Child,
    url: String,
}

impl Daemon {
    fn start(config: &std::path::Path) -> Self {
        let mut child = Command::new(BIN)
            .args(["serve", "--config", config.to_str().unwrap()])
            .env_remove("EDGRID_CONFIG")
            .stdout(Stdio::piped())
            .spawn()
            .unwrap();
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
        let addr = line.trim().strip_prefix("listening ").expect("listening line").to_string();
        Self {
            child,
            url: format!("http://{addr}"),
        }
    }

    fn run(&self, args: &[&str]) -> Output {
        let o = Command::new(BIN).args(args).env("EDGRID_SERVER", &self.url).output().unwrap();
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        o
    }
}

impl Drop for Daemon {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

#[test]
fn headless_session_against_a_daemon() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("grid.config");
    std::fs::write(&config, "# test daemon\ngmt.bind=127.0.0.1:0\ngmt.heartbeat.interval.ms=100\n").unwrap();
    let d = Daemon::start(&config);
    assert!(stdout(&d.run(&["node", "register", "--name", "n1", "--address", "127.0.0.1:7001", "--color", "#ff0000"]))
        .starts_with("node-1 Registered"));
    d.run(&["node", "start", "node-1"]);
    d.run(&["tier", "alloc", "--node", "node-1", "--kind", "DST"]);
    d.run(&["tier", "alloc", "--node", "node-1", "--kind", "dgt"]);
    d.run(&["tier", "alloc", "--node", "node-1", "--kind", "DWT", "--set", "max.demands=5"]);

    let wav = dir.path().join("tone.wav");
    let data: Vec<f64> = (0..2048)
        .map(|t| 0.8 * (2.0 * std::f64::consts::PI * 200.0 * t as f64 / 8000.0).sin())
        .collect();
    std::fs::write(&wav, edgrid_core::marf::encode_wav_pcm16(&data, 8000)).unwrap();
    let o = d.run(&["eval", "run", "--dgt", "dgt-3", "--wav", wav.to_str().unwrap()]);
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert!(lines[0].ends_with("completed"));
    assert!(lines[1].starts_with("1,"), "{out}");
    assert_eq!(lines.len(), 4);
    let o = d.run(&["eval", "run", "--dgt", "dgt-3", "--sine", "800"]);
    assert!(stdout(&o).lines().nth(1).unwrap().starts_with("3,"));

    let net = dir.path().join("net.json");
    d.run(&["net", "save", net.to_str().unwrap()]);
    d.run(&["tier", "dealloc", "dwt-4"]);
    let o = Command::new(BIN).args(["tier", "dealloc", "dwt-4"]).env("EDGRID_SERVER", &d.url).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("UnknownTier"));
    drop(d);

    // A second daemon starts from the saved network.
    let config2 = dir.path().join("again.config");
    std::fs::write(&config2, format!("gmt.bind=127.0.0.1:0\ngmt.network={}\n", net.display())).unwrap();
    let d2 = Daemon::start(&config2);
    let net2 = dir.path().join("net2.json");
    d2.run(&["net", "save", net2.to_str().unwrap()]);
    assert_eq!(std::fs::read_to_string(&net).unwrap(), std::fs::read_to_string(&net2).unwrap());
    let o = Command::new(BIN)
        .args(["net", "load", net.to_str().unwrap()])
        .env("EDGRID_SERVER", &d2.url)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}
