//! Line-oriented chat loop over any reader/writer pair.

use std::io::{BufRead, Write};

use serde::Serialize;

use super::{Engine, GenerationSettings, InteractionRecord};
use crate::error::{Error, Result};
use crate::model::tokenizer;

/// One session-log line.
#[derive(Serialize)]
struct LogLine<'a> {
    t: usize,
    query: String,
    answer: String,
    query_tokens: &'a [usize],
    answer_tokens: &'a [usize],
    stm_version_used: u64,
    stm_version_produced: u64,
    prompt_s: f64,
    per_token_s: f64,
    blocked_s: f64,
}

fn log_line(rec: &InteractionRecord) -> LogLine<'_> {
    LogLine {
        t: rec.t,
        query: tokenizer::decode(&rec.query),
        answer: tokenizer::decode(&rec.answer),
        query_tokens: &rec.query,
        answer_tokens: &rec.answer,
        stm_version_used: rec.stm_version_used,
        stm_version_produced: rec.stm_version_produced,
        prompt_s: rec.prompt_s,
        per_token_s: rec.per_token_s,
        blocked_s: rec.blocked_s,
    }
}

fn io(e: std::io::Error) -> Error {
    Error::io("<terminal>", e)
}

fn print_stats(engine: &Engine, out: &mut dyn Write) -> std::io::Result<()> {
    let timings = engine.update_timings();
    writeln!(out, "turn  prompt_ms  per_token_ms  update_ms  stm_version")?;
    for rec in engine.records() {
        let update = timings
            .iter()
            .find(|u| u.version_produced == rec.stm_version_produced)
            .map_or("-".to_string(), |u| format!("{:.3}", u.seconds() * 1e3));
        writeln!(
            out,
            "{:>4}  {:>9.3}  {:>12.3}  {:>9}  {:>11}",
            rec.t,
            rec.prompt_s * 1e3,
            rec.per_token_s * 1e3,
            update,
            rec.stm_version_produced
        )?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ReplSummary {
    pub interactions: usize,
    pub resets: usize,
    pub errors: usize,
}

/// Reads queries line by line until EOF or `/quit`. `/reset` restores the
/// initial memory and `/stats` prints per-turn timings. Errors on a single
/// line are reported and the session continues. Returns after any pending
/// memory update has committed.
pub fn run_repl<R: BufRead, W: Write>(
    engine: &mut Engine,
    settings: &GenerationSettings,
    input: R,
    mut out: W,
    mut session_log: Option<&mut dyn Write>,
) -> Result<ReplSummary> {
    let mut summary = ReplSummary::default();
    write!(out, "> ").map_err(io)?;
    out.flush().map_err(io)?;
    for line in input.lines() {
        let line = line.map_err(io)?;
        let line = line.trim_end_matches(['\r', '\n']);
        match line.trim() {
            "" => {}
            "/quit" | "/exit" => break,
            "/reset" => {
                engine.reset()?;
                summary.resets += 1;
                writeln!(out, "[memory reset]").map_err(io)?;
            }
            "/stats" => {
                engine.wait_idle();
                print_stats(engine, &mut out).map_err(io)?;
            }
            _ => match engine.interact_text(line, settings) {
                Ok((answer, rec)) => {
                    summary.interactions += 1;
                    writeln!(out, "{answer}").map_err(io)?;
                    if let Some(log) = session_log.as_deref_mut() {
                        let written = serde_json::to_writer(&mut *log, &log_line(&rec))
                            .map_err(Error::from)
                            .and_then(|_| log.write_all(b"\n").map_err(io));
                        if let Err(e) = written {
                            summary.errors += 1;
                            writeln!(out, "[session log error: {e}]").map_err(io)?;
                        }
                    }
                }
                Err(e) => {
                    summary.errors += 1;
                    writeln!(out, "[error: {e}]").map_err(io)?;
                }
            },
        }
        if let Some(e) = engine.take_update_error() {
            summary.errors += 1;
            writeln!(out, "[memory update failed: {e}]").map_err(io)?;
        }
        write!(out, "> ").map_err(io)?;
        out.flush().map_err(io)?;
    }
    engine.wait_idle();
    writeln!(out).map_err(io)?;
    if let Some(log) = session_log {
        log.flush().map_err(io)?;
    }
    Ok(summary)
}
