//! Python execution sandbox.
//!
//! Each run gets a fresh scratch directory as its working directory and
//! home, an empty environment, address-space and CPU rlimits, its own
//! process group (killed as a whole on timeout) and, where the kernel
//! allows unprivileged user namespaces, a private network namespace with no
//! interfaces. Socket connects are also disabled inside the interpreter.

use std::io::{Read, Write};
use std::os::unix::process::CommandExt;
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::ToolError;
use crate::text::truncate_with_marker;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeLimits {
    pub wall_seconds: f64,
    pub memory_bytes: u64,
}

impl Default for CodeLimits {
    fn default() -> Self {
        Self {
            wall_seconds: 60.0,
            memory_bytes: 2 << 30,
        }
    }
}

impl CodeLimits {
    pub fn validate(&self) -> Result<(), ToolError> {
        if !(self.wall_seconds > 0.0 && self.wall_seconds.is_finite()) || self.memory_bytes == 0 {
            return Err(ToolError::Invalid("code limits must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeOutput {
    pub stdout: String,
    pub stderr: String,
    /// None when the process was killed by a signal.
    pub exit_code: Option<i32>,
    pub timed_out: bool,
    pub truncated: bool,
}

pub trait CodeRunner: Send + Sync {
    fn run(&self, script: &str, limits: &CodeLimits, output_cap: usize) -> Result<CodeOutput, ToolError>;
}

const BOOTSTRAP: &str = r#"
import sys, socket
def _deny(*a, **k):
    raise OSError("network access is disabled in this sandbox")
for _n in ("connect", "connect_ex", "bind", "sendto", "sendmsg"):
    setattr(socket.socket, _n, _deny)
socket.getaddrinfo = _deny
socket.create_connection = _deny
_src = sys.stdin.read()
sys.stdin = open("/dev/null")
exec(compile(_src, "<script>", "exec"), {"__name__": "__main__"})
"#;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PythonSandbox {
    pub interpreter: String,
    pub isolate_network: bool,
}

impl Default for PythonSandbox {
    fn default() -> Self {
        Self {
            interpreter: "python3".into(),
            isolate_network: true,
        }
    }
}

/// Drain a pipe, keeping the first `keep` bytes and counting the rest.
fn drain(mut r: impl Read, keep: usize) -> (Vec<u8>, usize) {
    let mut kept = Vec::new();
    let mut dropped = 0;
    let mut buf = [0u8; 8192];
    loop {
        match r.read(&mut buf) {
            Ok(0) | Err(_) => break,
            Ok(n) => {
                let room = keep.saturating_sub(kept.len());
                let take = room.min(n);
                kept.extend_from_slice(&buf[..take]);
                dropped += n - take;
            }
        }
    }
    (kept, dropped)
}

impl CodeRunner for PythonSandbox {
    fn run(&self, script: &str, limits: &CodeLimits, output_cap: usize) -> Result<CodeOutput, ToolError> {
        limits.validate()?;
        let scratch = tempfile::tempdir().map_err(|e| ToolError::SandboxLaunch(e.to_string()))?;
        let mem = limits.memory_bytes;
        let cpu = limits.wall_seconds.ceil() as u64 + 1;
        let isolate = self.isolate_network;

        let mut cmd = Command::new(&self.interpreter);
        cmd.arg("-I")
            .arg("-c")
            .arg(BOOTSTRAP)
            .current_dir(scratch.path())
            .env_clear()
            .env("HOME", scratch.path())
            .env("TMPDIR", scratch.path())
            .env("PATH", "/usr/local/bin:/usr/bin:/bin")
            .env("PYTHONDONTWRITEBYTECODE", "1")
            .env("PYTHONIOENCODING", "utf-8")
            .env("MPLBACKEND", "Agg")
            .env("OPENBLAS_NUM_THREADS", "1")
            .env("OMP_NUM_THREADS", "1")
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .process_group(0);
        // SAFETY: the closure only issues raw syscalls (setrlimit, unshare),
        // which are async-signal-safe, between fork and exec.
        unsafe {
            cmd.pre_exec(move || {
                let as_limit = libc::rlimit {
                    rlim_cur: mem as libc::rlim_t,
                    rlim_max: mem as libc::rlim_t,
                };
                libc::setrlimit(libc::RLIMIT_AS, &as_limit);
                let cpu_limit = libc::rlimit {
                    rlim_cur: cpu as libc::rlim_t,
                    rlim_max: cpu as libc::rlim_t,
                };
                libc::setrlimit(libc::RLIMIT_CPU, &cpu_limit);
                if isolate {
                    // Fails without user-namespace support; the in-process
                    // socket guard still applies.
                    libc::unshare(libc::CLONE_NEWUSER | libc::CLONE_NEWNET);
                }
                Ok(())
            });
        }

        let mut child = cmd
            .spawn()
            .map_err(|e| ToolError::SandboxLaunch(format!("{}: {e}", self.interpreter)))?;
        let pid = child.id() as libc::pid_t;

        let mut stdin = child.stdin.take().expect("piped stdin");
        let script_bytes = script.as_bytes().to_vec();
        let writer = thread::spawn(move || {
            let _ = stdin.write_all(&script_bytes);
        });
        let stdout = child.stdout.take().expect("piped stdout");
        let stderr = child.stderr.take().expect("piped stderr");
        let out_reader = thread::spawn(move || drain(stdout, output_cap));
        let err_reader = thread::spawn(move || drain(stderr, output_cap));

        let deadline = Instant::now() + Duration::from_secs_f64(limits.wall_seconds);
        let mut timed_out = false;
        let status = loop {
            match child.try_wait() {
                Ok(Some(status)) => break Some(status),
                Ok(None) if Instant::now() >= deadline => {
                    timed_out = true;
                    // SAFETY: signalling our own child's process group.
                    unsafe {
                        libc::kill(-pid, libc::SIGKILL);
                    }
                    break child.wait().ok();
                }
                Ok(None) => thread::sleep(Duration::from_millis(5)),
                Err(_) => break None,
            }
        };
        // Reap anything left in the group so the pipes close.
        unsafe {
            libc::kill(-pid, libc::SIGKILL);
        }
        let _ = writer.join();
        let (out, out_dropped) = out_reader.join().unwrap_or_default();
        let (err, err_dropped) = err_reader.join().unwrap_or_default();

        let render = |bytes: Vec<u8>, dropped: usize| {
            let s = String::from_utf8_lossy(&bytes).into_owned();
            if dropped > 0 {
                (format!("{s}\n[... truncated {dropped} bytes]"), true)
            } else {
                truncate_with_marker(&s, output_cap)
            }
        };
        let (stdout, t1) = render(out, out_dropped);
        let (mut stderr, t2) = render(err, err_dropped);
        if timed_out {
            if !stderr.is_empty() && !stderr.ends_with('\n') {
                stderr.push('\n');
            }
            stderr.push_str(&format!("[timed out after {}s; process killed]", limits.wall_seconds));
        }
        Ok(CodeOutput {
            stdout,
            stderr,
            exit_code: status.and_then(|s| s.code()),
            timed_out,
            truncated: t1 || t2,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(script: &str, wall: f64) -> CodeOutput {
        PythonSandbox::default()
            .run(
                script,
                &CodeLimits {
                    wall_seconds: wall,
                    ..CodeLimits::default()
                },
                16 * 1024,
            )
            .unwrap()
    }

    #[test]
    fn captures_stdout() {
        let out = run("print(7)", 20.0);
        assert_eq!(out.stdout, "7\n");
        assert_eq!(out.exit_code, Some(0));
    }

    #[test]
    fn timeout_kills_infinite_loop() {
        let start = Instant::now();
        let out = run("while True:\n    pass\n", 2.0);
        assert!(out.timed_out);
        assert!(start.elapsed() < Duration::from_secs(5), "{:?}", start.elapsed());
        assert!(out.stderr.contains("timed out"));
    }

    #[test]
    fn output_is_truncated_with_marker() {
        let out = PythonSandbox::default()
            .run("print('x' * 100000)", &CodeLimits::default(), 1024)
            .unwrap();
        assert!(out.truncated);
        assert!(out.stdout.len() < 1200);
        assert!(out.stdout.contains("[... truncated"));
    }

    #[test]
    fn stderr_and_exit_code() {
        let out = run("import sys\nsys.stderr.write('bad')\nsys.exit(3)", 20.0);
        assert_eq!(out.stderr, "bad");
        assert_eq!(out.exit_code, Some(3));
    }

    #[test]
    fn network_is_unavailable() {
        let out = run(
            "import socket\ntry:\n    socket.create_connection(('93.184.216.34', 80), timeout=2)\n    print('connected')\nexcept OSError as e:\n    print('blocked')\n",
            20.0,
        );
        assert_eq!(out.stdout.trim(), "blocked");
    }

    #[test]
    fn runs_in_scratch_directory() {
        let out = run("import os\nopen('f.txt','w').write('hi')\nprint(os.listdir('.'))", 20.0);
        assert_eq!(out.stdout.trim(), "['f.txt']");
    }

    #[test]
    fn missing_interpreter_is_launch_error() {
        let sb = PythonSandbox {
            interpreter: "/nonexistent/python".into(),
            isolate_network: false,
        };
        let err = sb.run("print(1)", &CodeLimits::default(), 100).unwrap_err();
        assert!(err.is_retryable());
    }
}
