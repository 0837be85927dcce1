//! JSONL episode logs.
//!
//! One JSON object per line, keys in this order:
//!
//! ```text
//! {"schema_version":1,"episode_id":0,"env_name":"deep_sea","algorithm_name":"q_learning",
//!  "seed":0,"policy_mode":"stochastic","actions":[1,0],"rewards":[-0.01,0.0],
//!  "return":-0.01,"global_step_at_end":2,"truncated":false}
//! ```
//!
//! Either `rewards` or `return` may be omitted, not both. When both are
//! present they must agree to 1e-9. Floats are written in shortest
//! round-trip form. Paths ending in `.gz` are gzip-compressed.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::Serialize;
use serde_json::{Map, Value};
use thiserror::Error;

use crate::trajectory::{episode_env_seed, undiscounted_return, EpisodeRecord, PolicyMode, RunIdentity};

pub const SCHEMA_VERSION: u64 = 1;
const RETURN_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("line {line}: field `{field}`: {message}")]
    SchemaError {
        line: usize,
        field: String,
        message: String,
    },
    #[error("line {line}: unsupported schema_version {version}")]
    VersionUnsupported { line: usize, version: u64 },
    #[error("line {line}: episode_id {got} does not follow {previous}")]
    NonMonotoneIds { line: usize, previous: u64, got: u64 },
    #[error("line {line}: non-finite reward or return")]
    NaNReward { line: usize },
    #[error("cannot write episode {episode_id}: non-finite reward")]
    NonFiniteWrite { episode_id: u64 },
    #[error("i/o failure")]
    IoFailure(#[from] io::Error),
}

impl LogError {
    fn schema(line: usize, field: &str, message: impl Into<String>) -> Self {
        LogError::SchemaError {
            line,
            field: field.to_string(),
            message: message.into(),
        }
    }
}

/// Wire form of one episode. Field order is the on-disk key order.
#[derive(Debug, Serialize)]
struct EpisodeLine<'a> {
    schema_version: u64,
    episode_id: u64,
    env_name: &'a str,
    algorithm_name: &'a str,
    seed: u64,
    policy_mode: PolicyMode,
    actions: &'a [usize],
    #[serde(skip_serializing_if = "Option::is_none")]
    rewards: Option<&'a [f64]>,
    #[serde(rename = "return")]
    ret: f64,
    global_step_at_end: u64,
    truncated: bool,
}

/// Which run a log file belongs to. Read back from the first line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogHeader {
    pub env_name: String,
    pub algorithm_name: String,
    pub seed: u64,
}

impl From<&RunIdentity> for LogHeader {
    fn from(id: &RunIdentity) -> Self {
        Self {
            env_name: id.env_name.clone(),
            algorithm_name: id.algorithm_name.clone(),
            seed: id.seed,
        }
    }
}

/// Writes episodes as JSONL to any writer.
pub fn write_episodes<W: Write>(mut out: W, header: &LogHeader, episodes: &[EpisodeRecord]) -> Result<(), LogError> {
    for ep in episodes {
        let finite = ep.return_extrinsic.is_finite() && ep.rewards.iter().flatten().all(|r| r.is_finite());
        if !finite {
            return Err(LogError::NonFiniteWrite {
                episode_id: ep.episode_id,
            });
        }
        let line = EpisodeLine {
            schema_version: SCHEMA_VERSION,
            episode_id: ep.episode_id,
            env_name: &header.env_name,
            algorithm_name: &header.algorithm_name,
            seed: header.seed,
            policy_mode: ep.policy_mode,
            actions: &ep.actions,
            rewards: ep.rewards.as_deref(),
            ret: ep.return_extrinsic,
            global_step_at_end: ep.global_step_at_end,
            truncated: ep.truncated,
        };
        serde_json::to_writer(&mut out, &line).map_err(io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Writes a log file atomically (temp file in the same directory, then rename).
pub fn write_log(path: &Path, header: &LogHeader, episodes: &[EpisodeRecord]) -> Result<(), LogError> {
    let gz = is_gzip(path);
    write_atomic(path, |file| {
        if gz {
            let mut enc = GzEncoder::new(BufWriter::new(file), Compression::default());
            write_episodes(&mut enc, header, episodes)?;
            enc.finish()?.flush()?;
        } else {
            write_episodes(BufWriter::new(file), header, episodes)?;
        }
        Ok(())
    })
}

/// Creates `path` via a sibling temp file and a rename.
pub fn write_atomic<F>(path: &Path, fill: F) -> Result<(), LogError>
where
    F: FnOnce(&mut File) -> Result<(), LogError>,
{
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "path has no file name"))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    let result = (|| {
        let mut file = File::create(&tmp)?;
        fill(&mut file)?;
        file.sync_all()?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    result
}

fn is_gzip(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

/// Streaming reader: validates and yields one record per non-empty line.
pub struct LogReader<R> {
    lines: io::Lines<R>,
    line_no: usize,
    last_id: Option<u64>,
    header: Option<LogHeader>,
}

impl<R: BufRead> LogReader<R> {
    pub fn new(reader: R) -> Self {
        Self {
            lines: reader.lines(),
            line_no: 0,
            last_id: None,
            header: None,
        }
    }

    /// Run identity from the first line, once it has been read.
    pub fn header(&self) -> Option<&LogHeader> {
        self.header.as_ref()
    }
}

impl LogReader<BufReader<Box<dyn Read>>> {
    pub fn open(path: &Path) -> Result<Self, LogError> {
        let file = File::open(path)?;
        let inner: Box<dyn Read> = if is_gzip(path) {
            Box::new(MultiGzDecoder::new(file))
        } else {
            Box::new(file)
        };
        Ok(Self::new(BufReader::new(inner)))
    }
}

impl<R: BufRead> Iterator for LogReader<R> {
    type Item = Result<EpisodeRecord, LogError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => return Some(Err(e.into())),
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            return Some(self.parse(&line));
        }
    }
}

impl<R: BufRead> LogReader<R> {
    fn parse(&mut self, text: &str) -> Result<EpisodeRecord, LogError> {
        let line = self.line_no;
        let value: Value = match serde_json::from_str(text) {
            Ok(v) => v,
            Err(e) => {
                if has_non_finite_literal(text) {
                    return Err(LogError::NaNReward { line });
                }
                return Err(LogError::schema(line, "<line>", format!("invalid JSON: {e}")));
            }
        };
        let obj = value
            .as_object()
            .ok_or_else(|| LogError::schema(line, "<line>", "expected a JSON object"))?;

        let version = get_u64(obj, line, "schema_version")?;
        if version != SCHEMA_VERSION {
            return Err(LogError::VersionUnsupported { line, version });
        }
        let episode_id = get_u64(obj, line, "episode_id")?;
        let header = LogHeader {
            env_name: get_str(obj, line, "env_name")?,
            algorithm_name: get_str(obj, line, "algorithm_name")?,
            seed: get_u64(obj, line, "seed")?,
        };
        let policy_mode = get_str(obj, line, "policy_mode")?
            .parse::<PolicyMode>()
            .map_err(|m| LogError::schema(line, "policy_mode", m))?;
        let actions = obj
            .get("actions")
            .ok_or_else(|| LogError::schema(line, "actions", "missing"))?
            .as_array()
            .ok_or_else(|| LogError::schema(line, "actions", "expected an array"))?
            .iter()
            .map(|a| a.as_u64().map(|a| a as usize))
            .collect::<Option<Vec<usize>>>()
            .ok_or_else(|| LogError::schema(line, "actions", "expected non-negative integers"))?;
        if actions.is_empty() {
            return Err(LogError::schema(line, "actions", "episode has no actions"));
        }
        let rewards = match obj.get("rewards") {
            None | Some(Value::Null) => None,
            Some(v) => Some(
                v.as_array()
                    .ok_or_else(|| LogError::schema(line, "rewards", "expected an array"))?
                    .iter()
                    .map(Value::as_f64)
                    .collect::<Option<Vec<f64>>>()
                    .ok_or_else(|| LogError::schema(line, "rewards", "expected numbers"))?,
            ),
        };
        let ret = match obj.get("return") {
            None | Some(Value::Null) => None,
            Some(v) => Some(
                v.as_f64()
                    .ok_or_else(|| LogError::schema(line, "return", "expected a number"))?,
            ),
        };
        let global_step_at_end = get_u64(obj, line, "global_step_at_end")?;
        let truncated = obj
            .get("truncated")
            .ok_or_else(|| LogError::schema(line, "truncated", "missing"))?
            .as_bool()
            .ok_or_else(|| LogError::schema(line, "truncated", "expected a boolean"))?;

        if rewards.iter().flatten().chain(ret.iter()).any(|r| !r.is_finite()) {
            return Err(LogError::NaNReward { line });
        }
        let return_extrinsic = match (&rewards, ret) {
            (None, None) => {
                return Err(LogError::schema(
                    line,
                    "rewards",
                    "either `rewards` or `return` is required",
                ))
            }
            (Some(rs), given) => {
                if rs.len() != actions.len() {
                    return Err(LogError::schema(
                        line,
                        "rewards",
                        format!("{} rewards for {} actions", rs.len(), actions.len()),
                    ));
                }
                let sum = undiscounted_return(rs);
                if let Some(g) = given {
                    if (sum - g).abs() > RETURN_TOLERANCE {
                        return Err(LogError::schema(
                            line,
                            "return",
                            format!("rewards sum to {sum} but return is {g}"),
                        ));
                    }
                }
                sum
            }
            (None, Some(g)) => g,
        };

        if let Some(previous) = self.last_id {
            if episode_id <= previous {
                return Err(LogError::NonMonotoneIds {
                    line,
                    previous,
                    got: episode_id,
                });
            }
        }
        match &self.header {
            None => self.header = Some(header.clone()),
            Some(h) if *h != header => {
                return Err(LogError::schema(
                    line,
                    "seed",
                    "env_name/algorithm_name/seed differ from the first line; one run per file",
                ))
            }
            Some(_) => {}
        }
        self.last_id = Some(episode_id);

        Ok(EpisodeRecord {
            episode_id,
            length: actions.len(),
            actions,
            rewards,
            return_extrinsic,
            return_total: return_extrinsic,
            env_seed: episode_env_seed(header.seed, episode_id),
            policy_mode,
            global_step_at_end,
            truncated,
        })
    }
}

/// Detects NaN / Infinity literals as written by some JSON encoders.
fn has_non_finite_literal(text: &str) -> bool {
    let mut in_string = false;
    let mut escaped = false;
    let bytes = text.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        if in_string {
            match (escaped, b) {
                (true, _) => escaped = false,
                (false, b'\\') => escaped = true,
                (false, b'"') => in_string = false,
                _ => {}
            }
            continue;
        }
        if b == b'"' {
            in_string = true;
        } else if text[i..].starts_with("NaN") || text[i..].starts_with("Infinity") {
            return true;
        }
    }
    false
}

fn get_u64(obj: &Map<String, Value>, line: usize, field: &str) -> Result<u64, LogError> {
    obj.get(field)
        .ok_or_else(|| LogError::schema(line, field, "missing"))?
        .as_u64()
        .ok_or_else(|| LogError::schema(line, field, "expected a non-negative integer"))
}

fn get_str(obj: &Map<String, Value>, line: usize, field: &str) -> Result<String, LogError> {
    obj.get(field)
        .ok_or_else(|| LogError::schema(line, field, "missing"))?
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| LogError::schema(line, field, "expected a string"))
}

/// A fully read log.
#[derive(Debug, Clone)]
pub struct EpisodeLog {
    /// `None` for an empty file.
    pub header: Option<LogHeader>,
    pub episodes: Vec<EpisodeRecord>,
}

pub fn read_episodes<R: BufRead>(reader: R) -> Result<EpisodeLog, LogError> {
    let mut r = LogReader::new(reader);
    let episodes = r.by_ref().collect::<Result<Vec<_>, _>>()?;
    Ok(EpisodeLog {
        header: r.header,
        episodes,
    })
}

pub fn read_log(path: &Path) -> Result<EpisodeLog, LogError> {
    let mut r = LogReader::open(path)?;
    let episodes = r.by_ref().collect::<Result<Vec<_>, _>>()?;
    Ok(EpisodeLog {
        header: r.header,
        episodes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header() -> LogHeader {
        LogHeader {
            env_name: "deep_sea".into(),
            algorithm_name: "q_learning".into(),
            seed: 3,
        }
    }

    fn ep(id: u64, rewards: Vec<f64>) -> EpisodeRecord {
        let ret = undiscounted_return(&rewards);
        EpisodeRecord {
            episode_id: id,
            actions: (0..rewards.len()).map(|i| i % 2).collect(),
            length: rewards.len(),
            rewards: Some(rewards),
            return_extrinsic: ret,
            return_total: ret,
            env_seed: episode_env_seed(3, id),
            policy_mode: PolicyMode::Stochastic,
            global_step_at_end: 10 * (id + 1),
            truncated: false,
        }
    }

    fn to_string(episodes: &[EpisodeRecord]) -> String {
        let mut buf = Vec::new();
        write_episodes(&mut buf, &header(), episodes).unwrap();
        String::from_utf8(buf).unwrap()
    }

    fn parse(text: &str) -> Result<EpisodeLog, LogError> {
        read_episodes(text.as_bytes())
    }

    #[test]
    fn empty_run_writes_nothing() {
        assert_eq!(to_string(&[]), "");
        let log = parse("").unwrap();
        assert!(log.episodes.is_empty());
        assert!(log.header.is_none());
    }

    #[test]
    fn key_order_and_single_line() {
        let text = to_string(&[ep(0, vec![-0.1, 1.0 / 3.0])]);
        assert_eq!(text.lines().count(), 1);
        assert!(text.ends_with('\n') && !text.contains('\r'));
        let line = text.lines().next().unwrap();
        let keys = [
            "schema_version",
            "episode_id",
            "env_name",
            "algorithm_name",
            "seed",
            "policy_mode",
            "actions",
            "rewards",
            "return",
            "global_step_at_end",
            "truncated",
        ];
        let positions: Vec<usize> = keys.iter().map(|k| line.find(&format!("\"{k}\"")).unwrap()).collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]), "{line}");
        serde_json::from_str::<Value>(line).unwrap();
    }

    #[test]
    fn round_trip_is_exact() {
        let episodes = vec![
            ep(0, vec![0.1, 0.2, 0.30000000000000004]),
            ep(1, vec![-1e-300, 5e-324, 1.0 / 7.0]),
            ep(4, vec![0.0]),
        ];
        let text = to_string(&episodes);
        let log = parse(&text).unwrap();
        assert_eq!(log.episodes, episodes);
        assert_eq!(log.header, Some(header()));
        assert_eq!(to_string(&log.episodes), text);
    }

    #[test]
    fn gzip_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.jsonl.gz");
        let episodes = vec![ep(0, vec![0.5, 0.25]), ep(1, vec![1.0])];
        write_log(&path, &header(), &episodes).unwrap();
        let raw = std::fs::read(&path).unwrap();
        assert_eq!(&raw[..2], &[0x1f, 0x8b]);
        assert_eq!(read_log(&path).unwrap().episodes, episodes);
    }

    #[test]
    fn return_only_lines() {
        let text = r#"{"schema_version":1,"episode_id":0,"env_name":"e","algorithm_name":"a","seed":1,"policy_mode":"greedy","actions":[0,1,1],"return":2.5,"global_step_at_end":3,"truncated":true}"#;
        let log = parse(text).unwrap();
        let e = &log.episodes[0];
        assert_eq!(e.return_extrinsic, 2.5);
        assert_eq!(e.rewards, None);
        assert_eq!(e.policy_mode, PolicyMode::Greedy);
        assert!(e.truncated);
        assert_eq!(e.length, 3);
    }

    fn line_with(edit: impl Fn(&mut Map<String, Value>)) -> String {
        let text = to_string(&[ep(0, vec![1.0, 2.0])]);
        let mut v: Value = serde_json::from_str(text.trim()).unwrap();
        edit(v.as_object_mut().unwrap());
        v.to_string()
    }

    fn expect_schema(result: Result<EpisodeLog, LogError>, line: usize, field: &str) {
        match result {
            Err(LogError::SchemaError { line: l, field: f, .. }) => {
                assert_eq!((l, f.as_str()), (line, field));
            }
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn missing_actions_names_field_and_line() {
        let good = to_string(&[ep(0, vec![1.0])]);
        let bad = line_with(|o| {
            o.remove("actions");
            o.insert("episode_id".into(), 1.into());
        });
        expect_schema(parse(&format!("{good}{bad}\n")), 2, "actions");
    }

    #[test]
    fn mismatched_return_rejected() {
        let bad = line_with(|o| {
            o.insert("return".into(), 2.0.into());
        });
        expect_schema(parse(&bad), 1, "return");
    }

    #[test]
    fn other_validation_errors() {
        let bad = line_with(|o| {
            o.insert("rewards".into(), serde_json::json!([1.0]));
            o.remove("return");
        });
        expect_schema(parse(&bad), 1, "rewards");

        let bad = line_with(|o| {
            o.remove("rewards");
            o.remove("return");
        });
        expect_schema(parse(&bad), 1, "rewards");

        let bad = line_with(|o| {
            o.insert("policy_mode".into(), "random".into());
        });
        expect_schema(parse(&bad), 1, "policy_mode");

        let bad = line_with(|o| {
            o.insert("schema_version".into(), 2.into());
        });
        assert!(matches!(
            parse(&bad),
            Err(LogError::VersionUnsupported { line: 1, version: 2 })
        ));

        expect_schema(parse("{not json\n"), 1, "<line>");
        expect_schema(parse("[1,2]\n"), 1, "<line>");
    }

    #[test]
    fn non_monotone_ids_rejected() {
        let text = to_string(&[ep(3, vec![1.0])]) + &to_string(&[ep(3, vec![1.0])]);
        assert!(matches!(
            parse(&text),
            Err(LogError::NonMonotoneIds {
                line: 2,
                previous: 3,
                got: 3
            })
        ));
    }

    #[test]
    fn nan_literals_are_reward_errors() {
        let text = to_string(&[ep(0, vec![1.0, 2.0])]).replace("[1.0,2.0]", "[NaN,2.0]");
        assert!(matches!(parse(&text), Err(LogError::NaNReward { line: 1 })));
        let text = to_string(&[ep(0, vec![1.0, 2.0])]).replace("\"return\":3.0", "\"return\":-Infinity");
        assert!(matches!(parse(&text), Err(LogError::NaNReward { line: 1 })));
        // a string containing NaN is just a bad line
        assert!(!has_non_finite_literal(r#"{"env_name":"NaN"}"#));
    }

    #[test]
    fn non_finite_write_rejected() {
        let mut bad = ep(0, vec![1.0]);
        bad.rewards = Some(vec![f64::NAN]);
        let mut buf = Vec::new();
        assert!(matches!(
            write_episodes(&mut buf, &header(), &[bad]),
            Err(LogError::NonFiniteWrite { episode_id: 0 })
        ));
    }

    #[test]
    fn mixed_runs_rejected() {
        let a = to_string(&[ep(0, vec![1.0])]);
        let mut other = header();
        other.seed = 9;
        let mut buf = Vec::new();
        write_episodes(&mut buf, &other, &[ep(1, vec![1.0])]).unwrap();
        let text = a + &String::from_utf8(buf).unwrap();
        expect_schema(parse(&text), 2, "seed");
    }

    #[test]
    fn blank_lines_skipped_but_counted() {
        let good = to_string(&[ep(0, vec![1.0])]);
        let bad = line_with(|o| {
            o.remove("truncated");
            o.insert("episode_id".into(), 1.into());
        });
        expect_schema(parse(&format!("{good}\n{bad}\n")), 3, "truncated");
    }
}
