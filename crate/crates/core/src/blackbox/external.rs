//! Line protocol bridge to a classifier running in a child process.
//!
//! ```text
//! parent: HELLO cpath/1          child: OK <g>
//! parent: PREDICT <n> <p>
//! parent: <n lines of p comma-separated floats>
//!                                child: <n lines, one label in 1..=g>
//!                                child: END
//! ```
//!
//! Anything else coming from the child is a protocol error.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use crate::blackbox::Classifier;
use crate::error::{Error, Result};
use crate::tabular::{Dataset, LabelVector};

pub const HELLO: &str = "HELLO cpath/1";

#[derive(Debug, Clone)]
pub struct ExternalOptions {
    pub handshake_timeout: Duration,
    /// `None` waits for as long as the child stays alive.
    pub request_timeout: Option<Duration>,
}

impl Default for ExternalOptions {
    fn default() -> Self {
        ExternalOptions {
            handshake_timeout: Duration::from_secs(10),
            request_timeout: None,
        }
    }
}

struct ChildIo {
    child: Child,
    stdin: BufWriter<ChildStdin>,
    lines: Receiver<std::io::Result<String>>,
    broken: bool,
}

impl ChildIo {
    fn next_line(&mut self, timeout: Option<Duration>, stage: &'static str) -> Result<String> {
        let line = match timeout {
            Some(t) => self.lines.recv_timeout(t).map_err(|e| match e {
                RecvTimeoutError::Timeout => Error::Timeout(stage),
                RecvTimeoutError::Disconnected => child_gone(stage),
            })?,
            None => self.lines.recv().map_err(|_| child_gone(stage))?,
        };
        line.map_err(|e| Error::Protocol(format!("reading child output during {stage}: {e}")))
    }
}

fn child_gone(stage: &str) -> Error {
    Error::Protocol(format!("child exited during {stage}"))
}

/// A model served by a child process. Requests are serialized: one
/// in-flight `PREDICT` per child.
pub struct ExternalModel {
    io: Mutex<ChildIo>,
    n_classes: u32,
    command: Vec<String>,
    options: ExternalOptions,
}

impl std::fmt::Debug for ExternalModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalModel")
            .field("command", &self.command)
            .field("n_classes", &self.n_classes)
            .finish()
    }
}

impl ExternalModel {
    /// Starts `command[0]` with the remaining arguments and performs the
    /// handshake.
    pub fn spawn(command: &[String], options: ExternalOptions) -> Result<Self> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| Error::InvalidConfig("empty external model command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::io(program, e))?;
        let stdin = BufWriter::new(child.stdin.take().expect("stdin is piped"));
        let stdout = child.stdout.take().expect("stdout is piped");

        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let stop = line.is_err();
                if tx.send(line).is_err() || stop {
                    break;
                }
            }
        });

        let mut io = ChildIo {
            child,
            stdin,
            lines: rx,
            broken: false,
        };
        let n_classes = match handshake(&mut io, options.handshake_timeout) {
            Ok(g) => g,
            Err(e) => {
                let _ = io.child.kill();
                let _ = io.child.wait();
                return Err(e);
            }
        };
        Ok(ExternalModel {
            io: Mutex::new(io),
            n_classes,
            command: command.to_vec(),
            options,
        })
    }

    pub fn command(&self) -> &[String] {
        &self.command
    }
}

fn handshake(io: &mut ChildIo, timeout: Duration) -> Result<u32> {
    writeln!(io.stdin, "{HELLO}")
        .and_then(|_| io.stdin.flush())
        .map_err(|e| Error::Protocol(format!("writing handshake: {e}")))?;
    let reply = io.next_line(Some(timeout), "handshake")?;
    let g = reply
        .trim()
        .strip_prefix("OK ")
        .and_then(|g| g.trim().parse::<u32>().ok())
        .ok_or_else(|| Error::Protocol(format!("bad handshake reply {reply:?}")))?;
    if g < 2 {
        return Err(Error::Protocol(format!("child reports {g} classes")));
    }
    Ok(g)
}

fn write_request<W: Write>(out: &mut W, data: &Dataset) -> std::io::Result<()> {
    writeln!(out, "PREDICT {} {}", data.n_rows(), data.n_features())?;
    let mut line = String::new();
    for row in 0..data.n_rows() {
        line.clear();
        for j in 0..data.n_features() {
            if j > 0 {
                line.push(',');
            }
            line.push_str(&data.value(row, j).to_string());
        }
        line.push('\n');
        out.write_all(line.as_bytes())?;
    }
    out.flush()
}

impl Classifier for ExternalModel {
    fn n_classes(&self) -> u32 {
        self.n_classes
    }

    fn n_features(&self) -> Option<usize> {
        None
    }

    fn predict(&self, data: &Dataset) -> Result<LabelVector> {
        let mut io = self.io.lock().unwrap_or_else(|e| e.into_inner());
        if io.broken {
            return Err(Error::Protocol("child is in a failed state".into()));
        }
        let result = exchange(&mut io, data, self.n_classes, self.options.request_timeout);
        if result.is_err() {
            io.broken = true;
        }
        result
    }
}

fn exchange(io: &mut ChildIo, data: &Dataset, g: u32, timeout: Option<Duration>) -> Result<LabelVector> {
    write_request(&mut io.stdin, data).map_err(|e| Error::Protocol(format!("writing request: {e}")))?;
    let n = data.n_rows();
    let mut labels = Vec::with_capacity(n);
    while labels.len() < n {
        let line = io.next_line(timeout, "predict")?;
        let line = line.trim();
        if line == "END" {
            return Err(Error::Protocol(format!(
                "child sent {} labels for {n} rows",
                labels.len()
            )));
        }
        let label: u32 = line
            .parse()
            .map_err(|_| Error::Protocol(format!("unexpected child output {line:?}")))?;
        if label == 0 || label > g {
            return Err(Error::Protocol(format!("label {label} outside 1..={g}")));
        }
        labels.push(label);
    }
    let end = io.next_line(timeout, "predict")?;
    if end.trim() != "END" {
        return Err(Error::Protocol(format!(
            "expected END after {n} labels, got {:?}",
            end.trim()
        )));
    }
    LabelVector::new(labels, g)
}

impl Drop for ExternalModel {
    fn drop(&mut self) {
        let io = self.io.get_mut().unwrap_or_else(|e| e.into_inner());
        let _ = io.child.kill();
        let _ = io.child.wait();
    }
}

/// Child side of the protocol: answers requests with `model` until the
/// input closes.
pub fn serve<R: BufRead, W: Write>(model: &dyn Classifier, input: R, mut output: W) -> Result<()> {
    let proto = |msg: String| Error::Protocol(msg);
    let write_err = |e: std::io::Error| Error::Protocol(format!("writing response: {e}"));
    let mut lines = input.lines();
    let hello = lines
        .next()
        .ok_or_else(|| proto("input closed before handshake".into()))?
        .map_err(|e| proto(e.to_string()))?;
    if hello.trim() != HELLO {
        return Err(proto(format!("bad handshake {hello:?}")));
    }
    writeln!(output, "OK {}", model.n_classes()).map_err(write_err)?;
    output.flush().map_err(write_err)?;

    while let Some(header) = lines.next() {
        let header = header.map_err(|e| proto(e.to_string()))?;
        let header = header.trim();
        if header.is_empty() {
            continue;
        }
        let parts: Vec<&str> = header.split_whitespace().collect();
        let (n, p) = match parts.as_slice() {
            ["PREDICT", n, p] => (
                n.parse::<usize>().map_err(|_| proto(format!("bad row count {n:?}")))?,
                p.parse::<usize>().map_err(|_| proto(format!("bad column count {p:?}")))?,
            ),
            _ => return Err(proto(format!("unexpected request {header:?}"))),
        };
        let mut rows = Vec::with_capacity(n);
        for _ in 0..n {
            let line = lines
                .next()
                .ok_or_else(|| proto("input closed mid-request".into()))?
                .map_err(|e| proto(e.to_string()))?;
            let row = line
                .trim()
                .split(',')
                .map(|c| c.trim().parse::<f64>())
                .collect::<Result<Vec<f64>, _>>()
                .map_err(|_| proto(format!("bad data row {line:?}")))?;
            if row.len() != p {
                return Err(proto(format!("row has {} values, expected {p}", row.len())));
            }
            rows.push(row);
        }
        let data = Dataset::from_rows(Dataset::default_names(p), &rows)?;
        let labels = model.predict(&data)?;
        let mut buf = String::with_capacity(n * 2 + 4);
        for l in labels.labels() {
            buf.push_str(&l.to_string());
            buf.push('\n');
        }
        buf.push_str("END\n");
        output.write_all(buf.as_bytes()).map_err(write_err)?;
        output.flush().map_err(write_err)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sh(script: &str) -> Vec<String> {
        vec!["sh".into(), "-c".into(), script.into()]
    }

    /// Answers every request with `n + offset` copies of `label`.
    fn echo_script(label: &str, offset: i32) -> String {
        format!(
            r#"read hello; echo "OK 2"
while read cmd n p; do
  i=0; while [ $i -lt $n ]; do read row; i=$((i+1)); done
  i=0; while [ $i -lt $((n + {offset})) ]; do echo {label}; i=$((i+1)); done
  echo END
done"#
        )
    }

    fn data(n: usize) -> Dataset {
        Dataset::from_columns(vec!["a".into(), "b".into()], vec![vec![0.5; n], vec![-1.0; n]]).unwrap()
    }

    #[test]
    fn echo_classifier_answers_all_ones() {
        let m = ExternalModel::spawn(&sh(&echo_script("1", 0)), ExternalOptions::default()).unwrap();
        assert_eq!(m.n_classes(), 2);
        let labels = m.predict(&data(5)).unwrap();
        assert_eq!(labels.labels(), &[1; 5]);
        // stateless across requests
        assert_eq!(m.predict(&data(3)).unwrap().labels(), &[1; 3]);
    }

    #[test]
    fn short_response_is_malformed() {
        let m = ExternalModel::spawn(&sh(&echo_script("1", -1)), ExternalOptions::default()).unwrap();
        assert!(matches!(m.predict(&data(4)), Err(Error::Protocol(_))));
        // the handle stays failed afterwards
        assert!(matches!(m.predict(&data(4)), Err(Error::Protocol(_))));
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let m = ExternalModel::spawn(&sh(&echo_script("3", 0)), ExternalOptions::default()).unwrap();
        assert!(matches!(m.predict(&data(2)), Err(Error::Protocol(_))));
    }

    #[test]
    fn child_exit_mid_request() {
        let script = r#"read hello; echo "OK 2"; read cmd; exit 0"#;
        let m = ExternalModel::spawn(&sh(script), ExternalOptions::default()).unwrap();
        let err = m.predict(&data(2)).unwrap_err();
        assert!(matches!(err, Error::Protocol(ref msg) if msg.contains("exited") || msg.contains("writing")));
    }

    #[test]
    fn bad_handshake_and_timeout() {
        let err = ExternalModel::spawn(&sh("read hello; echo NOPE"), ExternalOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));
        let opts = ExternalOptions {
            handshake_timeout: Duration::from_millis(200),
            ..Default::default()
        };
        let err = ExternalModel::spawn(&sh("read hello; sleep 5"), opts).unwrap_err();
        assert!(matches!(err, Error::Timeout("handshake")));
        let err = ExternalModel::spawn(&["/nonexistent/model".to_string()], ExternalOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    struct SignOfFirst;
    impl Classifier for SignOfFirst {
        fn n_classes(&self) -> u32 {
            2
        }
        fn n_features(&self) -> Option<usize> {
            None
        }
        fn predict(&self, data: &Dataset) -> Result<LabelVector> {
            LabelVector::new(data.column(0).iter().map(|&v| if v < 0.0 { 1 } else { 2 }).collect(), 2)
        }
    }

    #[test]
    fn serve_speaks_the_protocol() {
        let input = "HELLO cpath/1\nPREDICT 3 2\n-1,0\n2,0\n0.5,1\nPREDICT 1 1\n-3\n";
        let mut out = Vec::new();
        serve(&SignOfFirst, input.as_bytes(), &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "OK 2\n1\n2\n2\nEND\n1\nEND\n");

        let mut out = Vec::new();
        assert!(serve(&SignOfFirst, "HELLO other\n".as_bytes(), &mut out).is_err());
        assert!(serve(&SignOfFirst, "HELLO cpath/1\nPREDICT 2 1\n1\n".as_bytes(), Vec::new()).is_err());
        assert!(serve(&SignOfFirst, "HELLO cpath/1\nPREDICT 1 2\n1\n".as_bytes(), Vec::new()).is_err());
    }
}
