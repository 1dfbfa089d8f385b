//! Reference judge for the NDJSON oracle protocol.
//!
//! Reads one request per line on stdin and answers with the exact ranking
//! under the task described by `--config` (the default task when omitted).
//! `--malformed-every N` replaces every Nth reply with a line that is not a
//! valid verdict, for exercising the trainer's error handling.

use std::io::{self, BufRead, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use grpo_rank::oracle::{WireReply, WireRequest};
use grpo_rank::{ExactOracle, ExperimentConfig, Oracle, OracleRequest, Prompt, TokenSequence};

#[derive(Parser)]
#[command(name = "grpo-rank-oracle-stub")]
struct Args {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    malformed_every: Option<u64>,
}

fn parse_prompt(s: &str) -> Option<Prompt> {
    s.strip_prefix("prompt-")?.parse().ok().map(Prompt)
}

fn parse_candidate(s: &str, end_token: usize) -> Option<TokenSequence> {
    let tokens: Vec<usize> = s.split_whitespace().map(str::parse).collect::<Result<_, _>>().ok()?;
    let terminated = tokens.last() == Some(&end_token);
    Some(TokenSequence { tokens, terminated })
}

fn main() -> ExitCode {
    let args = Args::parse();
    let cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p),
        None => ExperimentConfig::from_json("{}"),
    };
    let task = match cfg.and_then(|c| c.build_task()) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("oracle stub: {e}");
            return ExitCode::from(1);
        }
    };
    let end = task.vocab().end_token();
    let mut judge = ExactOracle::new(&task);
    let stdout = io::stdout();
    let mut out = stdout.lock();
    let mut served = 0u64;

    for line in io::stdin().lock().lines() {
        let Ok(line) = line else { break };
        served += 1;
        let reply = if args.malformed_every.is_some_and(|n| n > 0 && served.is_multiple_of(n)) {
            format!("{{\"id\": \"bogus\", \"served\": {served}}}")
        } else {
            let parsed = serde_json::from_str::<WireRequest>(&line).ok().and_then(|w| {
                let prompt = parse_prompt(&w.prompt)?;
                let candidates = w
                    .candidates
                    .iter()
                    .map(|c| parse_candidate(c, end))
                    .collect::<Option<Vec<_>>>()?;
                OracleRequest::new(w.id, prompt, candidates).ok()
            });
            match parsed.map(|req| judge.rank(&req)) {
                Some(Ok(v)) => serde_json::to_string(&WireReply {
                    id: v.id,
                    ranking: v.ranking.into_inner(),
                })
                .expect("reply serializes"),
                _ => {
                    eprintln!("oracle stub: cannot rank request: {line}");
                    continue;
                }
            }
        };
        if writeln!(out, "{reply}").and_then(|_| out.flush()).is_err() {
            break;
        }
    }
    ExitCode::SUCCESS
}
