//! Byte-level carriers for protocol messages.

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::thread;
use std::time::Duration;

use log::{debug, warn};

use super::wire::{Operation, Request, Response};
use crate::error::{Error, Result};

/// One ordered duplex stream to a detector.
///
/// `send` may be called several times before the matching `recv`s; replies
/// come back as raw lines and are correlated by id in the client.
pub trait Transport: Send {
    fn send(&mut self, request: &Request) -> Result<()>;
    fn recv(&mut self) -> Result<String>;
}

/// Something that answers protocol lines, e.g. the built-in mock.
pub trait LineHandler: Send {
    fn handle_line(&mut self, line: &str) -> String;
}

/// Answers messages in-process through a [`LineHandler`], still going
/// through full serialization on both sides.
pub struct LoopbackTransport<H> {
    handler: H,
    replies: VecDeque<String>,
}

impl<H: LineHandler> LoopbackTransport<H> {
    pub fn new(handler: H) -> Self {
        Self {
            handler,
            replies: VecDeque::new(),
        }
    }

    pub fn handler(&self) -> &H {
        &self.handler
    }

    pub fn into_handler(self) -> H {
        self.handler
    }
}

impl<H: LineHandler> Transport for LoopbackTransport<H> {
    fn send(&mut self, request: &Request) -> Result<()> {
        let reply = self.handler.handle_line(&request.to_line());
        self.replies.push_back(reply);
        Ok(())
    }

    fn recv(&mut self) -> Result<String> {
        self.replies.pop_front().ok_or_else(|| Error::Transport {
            message: "no reply pending".into(),
            retryable: false,
            attempts: 1,
        })
    }
}

/// Newline-delimited JSON over a child process's stdin/stdout.
pub struct SubprocessTransport {
    child: Child,
    stdin: Option<ChildStdin>,
    stdout: BufReader<ChildStdout>,
}

impl SubprocessTransport {
    pub fn spawn(command: &[String]) -> Result<Self> {
        Self::spawn_in(command, Path::new("."))
    }

    /// Starts `command` with `dir` as its working directory.
    pub fn spawn_in(command: &[String], dir: &Path) -> Result<Self> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| Error::Config("empty detector command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .current_dir(dir)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Transport {
                message: format!("cannot start detector '{program}': {e}"),
                retryable: false,
                attempts: 1,
            })?;
        let stdin = child.stdin.take().expect("stdin piped");
        let stdout = BufReader::new(child.stdout.take().expect("stdout piped"));
        Ok(Self {
            child,
            stdin: Some(stdin),
            stdout,
        })
    }
}

fn broken(message: String) -> Error {
    Error::Transport {
        message,
        retryable: false,
        attempts: 1,
    }
}

impl Transport for SubprocessTransport {
    fn send(&mut self, request: &Request) -> Result<()> {
        let line = request.to_line();
        debug!("-> {line}");
        let stdin = self
            .stdin
            .as_mut()
            .ok_or_else(|| broken("detector input already closed".into()))?;
        writeln!(stdin, "{line}")
            .and_then(|_| stdin.flush())
            .map_err(|e| broken(format!("writing to detector: {e}")))
    }

    fn recv(&mut self) -> Result<String> {
        let mut line = String::new();
        loop {
            line.clear();
            let n = self
                .stdout
                .read_line(&mut line)
                .map_err(|e| broken(format!("reading from detector: {e}")))?;
            if n == 0 {
                return Err(broken("detector closed its output stream".into()));
            }
            if !line.trim().is_empty() {
                debug!("<- {}", line.trim_end());
                return Ok(line);
            }
        }
    }
}

impl Drop for SubprocessTransport {
    fn drop(&mut self) {
        // Closing stdin asks the adapter to exit; kill if it lingers.
        drop(self.stdin.take());
        for _ in 0..40 {
            if let Ok(Some(_)) = self.child.try_wait() {
                return;
            }
            thread::sleep(Duration::from_millis(5));
        }
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// The same messages as HTTP POST bodies to `<base>/detect` and `<base>/finetune`.
pub struct HttpTransport {
    base: String,
    agent: ureq::Agent,
    max_attempts: u32,
    backoff: Duration,
    replies: VecDeque<String>,
}

impl HttpTransport {
    pub fn new(base: impl Into<String>) -> Self {
        Self {
            base: base.into().trim_end_matches('/').to_string(),
            agent: ureq::Agent::new_with_defaults(),
            max_attempts: 3,
            backoff: Duration::from_millis(200),
            replies: VecDeque::new(),
        }
    }

    pub fn with_retries(mut self, max_attempts: u32, backoff: Duration) -> Self {
        self.max_attempts = max_attempts.max(1);
        self.backoff = backoff;
        self
    }
}

impl Transport for HttpTransport {
    fn send(&mut self, request: &Request) -> Result<()> {
        let path = match request.op {
            Operation::Detect { .. } => "detect",
            Operation::Finetune { .. } => "finetune",
        };
        let url = format!("{}/{path}", self.base);
        let body = request.to_line();
        let mut attempt = 0;
        loop {
            attempt += 1;
            let result = self
                .agent
                .post(&url)
                .header("content-type", "application/json")
                .config()
                .http_status_as_error(false)
                .build()
                .send(body.as_str());
            match result {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    let text = resp.body_mut().read_to_string().map_err(|e| Error::Transport {
                        message: format!("reading reply from {url}: {e}"),
                        retryable: true,
                        attempts: attempt,
                    })?;
                    // Error replies may come with a non-2xx status but still
                    // carry a protocol body.
                    if status >= 500 && Response::parse(&text).is_err() {
                        if attempt < self.max_attempts {
                            warn!("{url} returned {status}, retrying");
                            thread::sleep(self.backoff * attempt);
                            continue;
                        }
                        return Err(Error::Transport {
                            message: format!("{url} returned HTTP {status}"),
                            retryable: true,
                            attempts: attempt,
                        });
                    }
                    self.replies.push_back(text);
                    return Ok(());
                }
                Err(e) => {
                    if attempt < self.max_attempts {
                        warn!("{url}: {e}, retrying");
                        thread::sleep(self.backoff * attempt);
                        continue;
                    }
                    return Err(Error::Transport {
                        message: format!("{url}: {e}"),
                        retryable: true,
                        attempts: attempt,
                    });
                }
            }
        }
    }

    fn recv(&mut self) -> Result<String> {
        self.replies.pop_front().ok_or_else(|| Error::Transport {
            message: "no reply pending".into(),
            retryable: false,
            attempts: 1,
        })
    }
}

/// Serves protocol lines from `reader` until EOF, writing one reply per line.
pub fn serve_lines<H, R, W>(handler: &mut H, reader: R, mut writer: W) -> std::io::Result<()>
where
    H: LineHandler + ?Sized,
    R: BufRead,
    W: Write,
{
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        writeln!(writer, "{}", handler.handle_line(&line))?;
        writer.flush()?;
    }
    Ok(())
}
