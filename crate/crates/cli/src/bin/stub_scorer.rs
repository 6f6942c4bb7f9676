//! Deterministic out-of-process scorer for exercising the line protocol.
//!
//! Speaks protocol v1 on stdin/stdout: a handshake line, then one JSON
//! response per request. The logprob is a pure function of the request text,
//! so runs are reproducible without any model. The failure modes let tests
//! drive the parent's error handling from the outside: a wrong-id response,
//! malformed lines, a scorer that never answers, and a bad handshake.

use std::io::{BufRead, Write};

use clap::{Parser, ValueEnum};
use sha2::{Digest, Sha256};

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    /// Answer every request correctly.
    Echo,
    /// Answer with id+1, which must poison the stream.
    WrongId,
    /// Answer every request with a non-JSON line.
    Malformed,
    /// Answer correctly except every third request, which gets garbage.
    Flaky,
    /// Complete the handshake, then read forever without answering.
    Mute,
    /// Announce an unsupported protocol version.
    BadHandshake,
}

#[derive(Parser)]
#[command(name = "stub_scorer")]
struct Args {
    #[arg(long, value_enum, default_value_t = Mode::Echo)]
    mode: Mode,
    #[arg(long, default_value = "stub-scorer")]
    name: String,
}

#[derive(serde::Deserialize)]
struct Request {
    id: u64,
    prefix: String,
    suffix: String,
}

/// Stable pseudo-logprob in roughly [-10.5, -0.5], keyed on the text.
fn fake_logprob(prefix: &str, suffix: &str) -> f64 {
    let mut h = Sha256::new();
    h.update(prefix.as_bytes());
    h.update([0x1f]);
    h.update(suffix.as_bytes());
    let digest = h.finalize();
    let word = u64::from_le_bytes(digest[..8].try_into().unwrap());
    -0.5 - (word % 10_000) as f64 / 1_000.0
}

fn main() {
    let args = Args::parse();
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();

    let protocol = if args.mode == Mode::BadHandshake { 99 } else { 1 };
    writeln!(out, "{{\"protocol\": {protocol}, \"name\": {:?}}}", args.name).unwrap();
    out.flush().unwrap();

    let mut n_requests = 0u64;
    for line in stdin.lock().lines() {
        let line = match line {
            Ok(l) => l,
            Err(_) => break,
        };
        if line.trim().is_empty() {
            continue;
        }
        let req: Request = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(_) => {
                writeln!(out, "cannot parse request").unwrap();
                out.flush().unwrap();
                continue;
            }
        };
        n_requests += 1;
        match args.mode {
            Mode::Mute => continue,
            Mode::Malformed => writeln!(out, "this is not a response").unwrap(),
            Mode::Flaky if n_requests % 3 == 0 => {
                writeln!(out, "{{\"id\": {}, \"logprob\": \"soon\"}}", req.id).unwrap()
            }
            Mode::WrongId => writeln!(
                out,
                "{{\"id\": {}, \"logprob\": {}}}",
                req.id + 1,
                fake_logprob(&req.prefix, &req.suffix)
            )
            .unwrap(),
            Mode::Echo | Mode::Flaky | Mode::BadHandshake => writeln!(
                out,
                "{{\"id\": {}, \"logprob\": {}}}",
                req.id,
                fake_logprob(&req.prefix, &req.suffix)
            )
            .unwrap(),
        }
        out.flush().unwrap();
    }
}
