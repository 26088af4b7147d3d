use std::io::{BufRead, BufReader};
use std::net::TcpListener;
use std::path::Path;
use std::process::{Child, Command, Stdio};

const BIN: &str = env!("CARGO_BIN_EXE_expd");

struct Killed(Child);

impl Drop for Killed {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn free_addr() -> String {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().to_string()
}

fn daemon(state: &Path, addr: &str) -> Killed {
    let mut child = Command::new(BIN)
        .args(["daemon", "run", "--listen", addr, "--state-dir"])
        .arg(state)
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    assert!(line.contains("listening on"), "{line:?}");
    Killed(child)
}

fn code(addr: &str, args: &[&str]) -> i32 {
    Command::new(BIN)
        .args(["--coordinator", addr])
        .args(args)
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .status()
        .unwrap()
        .code()
        .unwrap()
}

#[test]
fn exit_codes_follow_the_documented_table() {
    let dir = tempfile::tempdir().unwrap();
    let addr = free_addr();
    assert_eq!(code(&addr, &["status"]), 4, "no coordinator yet");

    let _d = daemon(&dir.path().join("state"), &addr);
    let ws = dir.path().join("ws");
    std::fs::create_dir_all(&ws).unwrap();
    let ws = ws.to_str().unwrap();
    assert_eq!(code(&addr, &["status"]), 0);
    assert_eq!(code(&addr, &["status", "t-99999999"]), 3);
    assert_eq!(code(&addr, &["cancel", "t-99999999"]), 3);
    assert_eq!(code(&addr, &["launch", "--workdir", ws]), 2, "empty command");
    assert_eq!(code(&addr, &["launch", "--workdir", ws, "--mount", "nope", "--", "true"]), 2);
    assert_eq!(code(&addr, &["reproduce", "t-99999999"]), 2, "needs --dest or --launch");

    let _agent = Killed(
        Command::new(BIN)
            .args(["--coordinator", &addr, "executor", "run", "--id", "codes", "--scratch"])
            .arg(dir.path().join("scratch"))
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()
            .unwrap(),
    );
    assert_eq!(code(&addr, &["launch", "--workdir", ws, "-f", "--", "sh", "-c", "exit 5"]), 1);
    assert_eq!(code(&addr, &["launch", "--workdir", ws, "-f", "--", "true"]), 0);
}
