//! Detector backed by an external program.
//!
//! For every `detect` call the program is started with its configured
//! arguments and receives one JSON object on stdin:
//!
//! ```json
//! {"image_id": "...", "view_id": "...", "transform": [a, b, tx, c, d, ty], "canvas": [w, h]}
//! ```
//!
//! It must write detection records (the JSON-lines detection format) for
//! that image and view to stdout and exit with status 0.

use std::io::Write;
use std::path::PathBuf;
use std::process::{Command, Stdio};

use serde::{Deserialize, Serialize};

use crate::detector::{Detector, ViewKey};
use crate::error::{Error, Result};
use crate::formats::read_detections;
use crate::geometry::{AffineTransform, Detection, Size};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandDetector {
    pub name: String,
    pub program: PathBuf,
    #[serde(default)]
    pub args: Vec<String>,
    /// View ids the program can serve besides identity; `["*"]` means any.
    #[serde(default)]
    pub views: Vec<String>,
}

#[derive(Serialize)]
struct Request<'a> {
    image_id: &'a str,
    view_id: &'a str,
    transform: [f64; 6],
    canvas: [f64; 2],
}

impl CommandDetector {
    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Plugin {
            detector: self.name.clone(),
            message: message.into(),
        }
    }
}

impl Detector for CommandDetector {
    fn name(&self) -> &str {
        &self.name
    }

    fn supports_view(&self, view_id: &str) -> bool {
        view_id == crate::formats::IDENTITY_VIEW || self.views.iter().any(|v| v == "*" || v == view_id)
    }

    fn detect(&self, view: &ViewKey, t: &AffineTransform, canvas: Size) -> Result<Vec<Detection>> {
        let request = serde_json::to_string(&Request {
            image_id: &view.image_id,
            view_id: &view.view_id,
            transform: t.coefficients(),
            canvas: [canvas.width, canvas.height],
        })
        .expect("request serializes");
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| Error::io(&self.program, e))?;
        {
            let mut stdin = child.stdin.take().expect("stdin is piped");
            // A program that ignores its input may close stdin early.
            let _ = stdin.write_all(request.as_bytes()).and_then(|_| stdin.write_all(b"\n"));
        }
        let out = child.wait_with_output().map_err(|e| Error::io(&self.program, e))?;
        if !out.status.success() {
            return Err(self.fail(format!(
                "exited with {}: {}",
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        let records = read_detections(out.stdout.as_slice(), &format!("{} stdout", self.name), None)?;
        records
            .into_iter()
            .map(|r| {
                if r.image_id != view.image_id || r.view_id != view.view_id {
                    return Err(self.fail(format!(
                        "answered for ({}, {}) when asked for ({}, {})",
                        r.image_id, r.view_id, view.image_id, view.view_id
                    )));
                }
                Ok(r.detection())
            })
            .collect()
    }
}
