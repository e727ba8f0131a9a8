//! Planner and region-reasoner clients.
//!
//! Wire protocol:
//!
//! * `POST <url>/plan` with `{"prompt": .., "K": ..}` answers with plan JSON.
//! * `POST <url>/reason` with `{"image": <base64 PNM>, "sub_prompt": {"id", "text"}}`
//!   answers with `{"mask": <base64 PGM, 0/255>}`.
//!
//! Besides HTTP, planners accept `mock:<script>` and reasoners accept
//! `toy:<weights>`, `oracle:<scene.json>` and `full`.

use std::sync::Arc;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::Deserialize;
use serde_json::json;

use crate::error::{Error, Result};
use crate::image::{binarize, Image, Mask, SoftMask};
use crate::io::{decode_image, encode_pnm};
use crate::plan::SubPrompt;
use crate::plan::{instruction_from_prompt, parse_plan, EditPlan, PLAN_SCHEMA};
use crate::reasoner::{predict_region, ToyReasonerModel};
use crate::scene::SyntheticScene;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Registered mock planner scripts.
pub const MOCK_SCRIPTS: &[&str] = &["demo", "echo", "split", "empty"];

fn log_line(enabled: bool, value: serde_json::Value) {
    if enabled {
        eprintln!("{value}");
    }
}

fn check_timeout(timeout: Duration) -> Result<()> {
    if timeout.is_zero() {
        Err(Error::validation("timeout must be positive"))
    } else {
        Ok(())
    }
}

/// POSTs `body` to `url`, retrying transport failures and 5xx answers.
fn post_json(
    url: &str,
    body: &serde_json::Value,
    timeout: Duration,
    retry_count: u32,
    verbose: bool,
) -> Result<String> {
    let agent = ureq::AgentBuilder::new().timeout(timeout).build();
    let attempts = retry_count + 1;
    let mut last = String::new();
    for attempt in 1..=attempts {
        log_line(
            verbose,
            json!({"event": "request", "url": url, "attempt": attempt, "body": redact(body)}),
        );
        match agent.post(url).send_json(body.clone()) {
            Ok(resp) => {
                let text = resp.into_string().map_err(|e| Error::Backend {
                    attempts: attempt,
                    message: format!("reading response: {e}"),
                })?;
                log_line(
                    verbose,
                    json!({"event": "response", "url": url, "attempt": attempt, "bytes": text.len()}),
                );
                return Ok(text);
            }
            Err(ureq::Error::Status(code, _)) if code < 500 => {
                return Err(Error::Backend {
                    attempts: attempt,
                    message: format!("{url} answered HTTP {code}"),
                })
            }
            Err(e) => {
                last = e.to_string();
                log_line(
                    verbose,
                    json!({"event": "failure", "url": url, "attempt": attempt, "error": last}),
                );
                if attempt < attempts {
                    std::thread::sleep(Duration::from_millis(50 * u64::from(attempt)));
                }
            }
        }
    }
    Err(Error::Backend {
        attempts,
        message: last,
    })
}

/// Shortens base64 payloads in logged request bodies.
fn redact(body: &serde_json::Value) -> serde_json::Value {
    match body {
        serde_json::Value::Object(map) => map
            .iter()
            .map(|(k, v)| {
                let v = match v {
                    serde_json::Value::String(s) if k == "image" => {
                        json!(format!("<{} base64 chars>", s.len()))
                    }
                    other => other.clone(),
                };
                (k.clone(), v)
            })
            .collect(),
        other => other.clone(),
    }
}

fn url_join(base: &str, path: &str) -> String {
    format!("{}/{}", base.trim_end_matches('/'), path)
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum PlannerEndpoint {
    Mock(String),
    Http(String),
}

/// Client for the planner `C_p`.
#[derive(Debug, Clone)]
pub struct PlannerClient {
    endpoint: PlannerEndpoint,
    timeout: Duration,
    retry_count: u32,
    verbose: bool,
}

impl PlannerClient {
    /// `endpoint` is `mock:<script>` or an `http(s)://` base URL.
    pub fn new(endpoint: &str, timeout: Duration, retry_count: u32) -> Result<Self> {
        check_timeout(timeout)?;
        let endpoint = if let Some(script) = endpoint.strip_prefix("mock:") {
            if !MOCK_SCRIPTS.contains(&script) {
                return Err(Error::validation(format!(
                    "unknown mock planner script `{script}` (known: {})",
                    MOCK_SCRIPTS.join(", ")
                )));
            }
            PlannerEndpoint::Mock(script.to_string())
        } else if endpoint.starts_with("http://") || endpoint.starts_with("https://") {
            PlannerEndpoint::Http(endpoint.to_string())
        } else {
            return Err(Error::validation(format!(
                "unsupported planner endpoint `{endpoint}`"
            )));
        };
        Ok(Self {
            endpoint,
            timeout,
            retry_count,
            verbose: false,
        })
    }

    pub fn mock(script: &str) -> Result<Self> {
        Self::new(&format!("mock:{script}"), DEFAULT_TIMEOUT, 0)
    }

    pub fn with_verbose(mut self, verbose: bool) -> Self {
        self.verbose = verbose;
        self
    }

    pub fn descriptor(&self) -> String {
        match &self.endpoint {
            PlannerEndpoint::Mock(s) => format!("mock:{s}"),
            PlannerEndpoint::Http(u) => u.clone(),
        }
    }

    /// Sends the planner prompt and validates the answer against `max_steps`.
    pub fn request_plan(&self, prompt: &str, max_steps: usize) -> Result<EditPlan> {
        let payload = match &self.endpoint {
            PlannerEndpoint::Mock(script) => {
                let instruction = instruction_from_prompt(prompt).unwrap_or(prompt).trim();
                let payload = mock_plan_payload(script, instruction);
                log_line(
                    self.verbose,
                    json!({"event": "mock_plan", "script": script, "instruction": instruction, "payload": payload}),
                );
                payload
            }
            PlannerEndpoint::Http(base) => post_json(
                &url_join(base, "plan"),
                &json!({"prompt": prompt, "K": max_steps}),
                self.timeout,
                self.retry_count,
                self.verbose,
            )?,
        };
        parse_plan(&payload, max_steps)
    }
}

/// Deterministic table-driven planner answers, as raw JSON text.
fn mock_plan_payload(script: &str, instruction: &str) -> String {
    let steps: Vec<String> = match script {
        "demo" => match instruction.to_ascii_lowercase().as_str() {
            "make it dramatic" => vec![
                "add turbulent waves".into(),
                "add dark storm clouds and lightning".into(),
            ],
            _ => vec![instruction.to_string()],
        },
        "split" => instruction
            .split(';')
            .flat_map(|part| part.split(" then "))
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect(),
        "empty" => Vec::new(),
        _ => vec![instruction.to_string()],
    };
    let subs: Vec<_> = steps
        .iter()
        .enumerate()
        .map(|(i, t)| json!({"id": i + 1, "text": t}))
        .collect();
    json!({
        "schema": PLAN_SCHEMA,
        "sub_prompts": subs,
        "rationale": format!("mock:{script} decomposition of `{instruction}`"),
        "double_checked": true,
    })
    .to_string()
}

pub fn request_plan(client: &PlannerClient, prompt: &str, max_steps: usize) -> Result<EditPlan> {
    client.request_plan(prompt, max_steps)
}

#[derive(Debug, Clone)]
enum ReasonerEndpoint {
    Toy(Arc<ToyReasonerModel>, String),
    Oracle(Arc<SyntheticScene>, String),
    Full,
    Http(String),
}

/// Client for the region reasoner `C_m`.
#[derive(Debug, Clone)]
pub struct ReasonerClient {
    endpoint: ReasonerEndpoint,
    timeout: Duration,
    retry_count: u32,
    verbose: bool,
}

#[derive(Deserialize)]
struct ReasonResponse {
    mask: String,
}

impl ReasonerClient {
    /// `endpoint` is `toy:<weights>`, `oracle:<scene.json>`, `full`, or an
    /// `http(s)://` base URL.
    pub fn new(endpoint: &str, timeout: Duration) -> Result<Self> {
        check_timeout(timeout)?;
        let endpoint = if let Some(path) = endpoint.strip_prefix("toy:") {
            ReasonerEndpoint::Toy(
                Arc::new(ToyReasonerModel::load(path)?),
                endpoint.to_string(),
            )
        } else if let Some(path) = endpoint.strip_prefix("oracle:") {
            ReasonerEndpoint::Oracle(Arc::new(SyntheticScene::load(path)?), endpoint.to_string())
        } else if endpoint == "full" {
            ReasonerEndpoint::Full
        } else if endpoint.starts_with("http://") || endpoint.starts_with("https://") {
            ReasonerEndpoint::Http(endpoint.to_string())
        } else {
            return Err(Error::validation(format!(
                "unsupported reasoner endpoint `{endpoint}`"
            )));
        };
        Ok(Self {
            endpoint,
            timeout,
            retry_count: 0,
            verbose: false,
        })
    }

    fn local(endpoint: ReasonerEndpoint) -> Self {
        Self {
            endpoint,
            timeout: DEFAULT_TIMEOUT,
            retry_count: 0,
            verbose: false,
        }
    }

    pub fn toy(model: ToyReasonerModel) -> Self {
        Self::local(ReasonerEndpoint::Toy(
            Arc::new(model),
            "toy:<memory>".into(),
        ))
    }

    /// Answers every sub-prompt with the scene's ground-truth region.
    pub fn oracle(scene: SyntheticScene) -> Self {
        Self::local(ReasonerEndpoint::Oracle(
            Arc::new(scene),
            "oracle:<memory>".into(),
        ))
    }

    /// Selects the whole image for every sub-prompt.
    pub fn full() -> Self {
        Self::local(ReasonerEndpoint::Full)
    }

    pub fn with_retries(mut self, retry_count: u32) -> Self {
        self.retry_count = retry_count;
        self
    }

    pub fn with_verbose(mut self, verbose: bool) -> Self {
        self.verbose = verbose;
        self
    }

    pub fn descriptor(&self) -> String {
        match &self.endpoint {
            ReasonerEndpoint::Toy(_, d) | ReasonerEndpoint::Oracle(_, d) => d.clone(),
            ReasonerEndpoint::Full => "full".into(),
            ReasonerEndpoint::Http(u) => u.clone(),
        }
    }

    pub fn request_region(
        &self,
        image: &Image,
        sub_prompt: &SubPrompt,
        threshold: f64,
    ) -> Result<Mask> {
        if sub_prompt.text.trim().is_empty() {
            return Err(Error::validation("sub-prompt text is empty"));
        }
        if !(0.0..=1.0).contains(&threshold) {
            return Err(Error::validation(format!(
                "threshold {threshold} outside [0,1]"
            )));
        }
        let (h, w) = (image.height(), image.width());
        let mask = match &self.endpoint {
            ReasonerEndpoint::Toy(model, _) => {
                binarize(&predict_region(model, image, sub_prompt)?, threshold)
            }
            ReasonerEndpoint::Oracle(scene, _) => {
                if (scene.config.height, scene.config.width) != (h, w) {
                    return Err(Error::shape(format!(
                        "oracle scene is {}x{}, image is {h}x{w}",
                        scene.config.height, scene.config.width
                    )));
                }
                scene.region_for_prompt(&sub_prompt.text)?
            }
            ReasonerEndpoint::Full => Mask::full(h, w)?,
            ReasonerEndpoint::Http(base) => {
                let body = json!({
                    "image": B64.encode(encode_pnm(image)?),
                    "sub_prompt": sub_prompt,
                });
                let text = post_json(
                    &url_join(base, "reason"),
                    &body,
                    self.timeout,
                    self.retry_count,
                    self.verbose,
                )?;
                let resp: ReasonResponse = serde_json::from_str(&text)
                    .map_err(|e| Error::Schema(format!("reason response: {e}")))?;
                let bytes = B64
                    .decode(resp.mask.trim())
                    .map_err(|e| Error::Schema(format!("mask is not base64: {e}")))?;
                let gray = decode_image(&bytes)
                    .map_err(|e| Error::Schema(format!("mask is not an image: {e}")))?;
                if (gray.height(), gray.width()) != (h, w) {
                    return Err(Error::Schema(format!(
                        "reasoner returned a {}x{} mask for a {h}x{w} image",
                        gray.height(),
                        gray.width()
                    )));
                }
                let ch = gray.channels();
                let soft = SoftMask::new(h, w, gray.data().iter().step_by(ch).copied().collect())?;
                binarize(&soft, threshold)
            }
        };
        debug_assert!(image.same_size(&mask));
        Ok(mask)
    }
}

pub fn request_region(
    client: &ReasonerClient,
    image: &Image,
    sub_prompt: &SubPrompt,
    threshold: f64,
) -> Result<Mask> {
    client.request_region(image, sub_prompt, threshold)
}

/// A throwaway HTTP/1.1 server answering a fixed sequence of requests,
/// for exercising the HTTP clients without external services.
#[doc(hidden)]
pub mod testing {
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::thread::JoinHandle;

    /// One canned answer; the handler sees the request path and body.
    pub type Handler = Box<dyn Fn(&str, &str) -> (u16, String) + Send>;

    /// Serves `count` connections, then exits. Returns the base URL and a
    /// handle yielding the `(path, body)` pairs received.
    pub fn serve(count: usize, handler: Handler) -> (String, JoinHandle<Vec<(String, String)>>) {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind loopback");
        let url = format!("http://{}", listener.local_addr().expect("local addr"));
        let handle = std::thread::spawn(move || {
            let mut seen = Vec::new();
            for stream in listener.incoming().take(count) {
                let Ok(mut stream) = stream else { continue };
                let mut reader = BufReader::new(stream.try_clone().expect("clone stream"));
                let mut request_line = String::new();
                reader.read_line(&mut request_line).ok();
                let path = request_line
                    .split_whitespace()
                    .nth(1)
                    .unwrap_or("")
                    .to_string();
                let mut length = 0usize;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                        break;
                    }
                    if let Some((k, v)) = line.split_once(':') {
                        if k.eq_ignore_ascii_case("content-length") {
                            length = v.trim().parse().unwrap_or(0);
                        }
                    }
                }
                let mut body = vec![0u8; length];
                reader.read_exact(&mut body).ok();
                let body = String::from_utf8_lossy(&body).into_owned();
                let (status, answer) = handler(&path, &body);
                let reply = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{answer}",
                    answer.len()
                );
                stream.write_all(reply.as_bytes()).ok();
                seen.push((path, body));
            }
            seen
        });
        (url, handle)
    }
}

#[cfg(test)]
mod tests {
    use super::testing::serve;
    use super::*;
    use crate::io::encode_mask;
    use crate::plan::{build_planner_prompt, serialize_plan, Instruction, PlannerPromptConfig};
    use crate::scene::{Color, SceneConfig, Shape, ShapeKind};

    fn prompt_for(text: &str) -> String {
        let instr = Instruction::new(text, "a calm sea at night").unwrap();
        build_planner_prompt(&instr, &PlannerPromptConfig::default()).unwrap()
    }

    #[test]
    fn demo_script_plans_the_storm() {
        let client = PlannerClient::mock("demo").unwrap();
        let plan = client
            .request_plan(&prompt_for("make it dramatic"), 3)
            .unwrap();
        let texts: Vec<_> = plan.sub_prompts().iter().map(|p| p.text.as_str()).collect();
        assert_eq!(
            texts,
            ["add turbulent waves", "add dark storm clouds and lightning"]
        );
        let again = client
            .request_plan(&prompt_for("make it dramatic"), 3)
            .unwrap();
        assert_eq!(serialize_plan(&plan), serialize_plan(&again));
    }

    #[test]
    fn single_instruction_is_echoed() {
        let client = PlannerClient::mock("demo").unwrap();
        let plan = client.request_plan(&prompt_for("brighten"), 3).unwrap();
        assert_eq!(plan.len(), 1);
        assert_eq!(plan.sub_prompts()[0].text, "brighten");
    }

    #[test]
    fn split_script_respects_the_bound() {
        let client = PlannerClient::mock("split").unwrap();
        let ok = client.request_plan(&prompt_for("a then b; c"), 3).unwrap();
        assert_eq!(ok.len(), 3);
        let err = client
            .request_plan(&prompt_for("a then b then c then d"), 3)
            .unwrap_err();
        assert!(matches!(err, Error::PlanBounds { k: 4, max: 3 }));
        let empty = PlannerClient::mock("empty")
            .unwrap()
            .request_plan("x", 3)
            .unwrap_err();
        assert!(matches!(empty, Error::PlanBounds { k: 0, .. }));
    }

    #[test]
    fn unknown_script_and_zero_timeout_rejected() {
        assert!(PlannerClient::mock("nope").is_err());
        assert!(PlannerClient::new("mock:demo", Duration::ZERO, 0).is_err());
        assert!(PlannerClient::new("ftp://x", DEFAULT_TIMEOUT, 0).is_err());
    }

    #[test]
    fn unreachable_endpoint_reports_every_attempt() {
        // Bind then drop to get a port that refuses connections.
        let port = std::net::TcpListener::bind("127.0.0.1:0")
            .unwrap()
            .local_addr()
            .unwrap()
            .port();
        let client = PlannerClient::new(
            &format!("http://127.0.0.1:{port}"),
            Duration::from_secs(2),
            2,
        )
        .unwrap();
        match client.request_plan("p", 3) {
            Err(Error::Backend { attempts, .. }) => assert_eq!(attempts, 3),
            other => panic!("expected backend error, got {other:?}"),
        }
    }

    #[test]
    fn http_planner_round_trip_and_retry() {
        let plan = EditPlan::from_texts(["add turbulent waves"], "r", true, 3).unwrap();
        let payload = serialize_plan(&plan);
        let calls = std::sync::atomic::AtomicUsize::new(0);
        let (url, handle) = serve(
            2,
            Box::new(move |_, _| {
                if calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst) == 0 {
                    (503, "{}".into())
                } else {
                    (200, payload.clone())
                }
            }),
        );
        let client = PlannerClient::new(&url, Duration::from_secs(5), 1).unwrap();
        let got = client.request_plan("make it so", 3).unwrap();
        assert_eq!(serialize_plan(&got), serialize_plan(&plan));
        let seen = handle.join().unwrap();
        assert_eq!(seen.len(), 2);
        assert_eq!(seen[1].0, "/plan");
        let body: serde_json::Value = serde_json::from_str(&seen[1].1).unwrap();
        assert_eq!(body["K"], 3);
        assert_eq!(body["prompt"], "make it so");
    }

    #[test]
    fn http_planner_schema_errors_propagate() {
        let (url, handle) = serve(
            1,
            Box::new(|_, _| {
                (200, r#"{"schema":"mcot_plan_v1","sub_prompts":[{"id":1,"text":""}],"rationale":"","double_checked":false}"#.into())
            }),
        );
        let client = PlannerClient::new(&url, Duration::from_secs(5), 0).unwrap();
        assert!(matches!(client.request_plan("x", 3), Err(Error::Schema(_))));
        handle.join().unwrap();
    }

    fn square_scene() -> SyntheticScene {
        SyntheticScene::from_shapes(
            SceneConfig::default(),
            vec![Shape {
                kind: ShapeKind::Square,
                color: Color::Blue,
                top: 5,
                left: 6,
                size: 4,
            }],
        )
        .unwrap()
    }

    #[test]
    fn oracle_returns_ground_truth() {
        let scene = square_scene();
        let client = ReasonerClient::oracle(scene.clone());
        let m = client
            .request_region(&scene.image, &SubPrompt::new(1, "make the square red"), 0.5)
            .unwrap();
        assert_eq!(m.count(), 16);
        assert!(m.get(5, 6) && m.get(8, 9) && !m.get(4, 6));
        let other = Image::filled(8, 8, 3, 0.5).unwrap();
        assert!(client
            .request_region(&other, &SubPrompt::new(1, "make the square red"), 0.5)
            .is_err());
    }

    #[test]
    fn oracle_from_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.json");
        square_scene().save(&path).unwrap();
        let client =
            ReasonerClient::new(&format!("oracle:{}", path.display()), DEFAULT_TIMEOUT).unwrap();
        let m = client
            .request_region(
                &square_scene().image,
                &SubPrompt::new(1, "remove the square"),
                0.5,
            )
            .unwrap();
        assert_eq!(m.count(), 16);
    }

    #[test]
    fn http_reasoner_checks_dimensions() {
        let small = encode_mask(&Mask::full(2, 2).unwrap()).unwrap();
        let answer = json!({"mask": B64.encode(small)}).to_string();
        let (url, handle) = serve(1, Box::new(move |_, _| (200, answer.clone())));
        let client = ReasonerClient::new(&url, Duration::from_secs(5)).unwrap();
        let img = Image::filled(16, 16, 3, 128.0 / 255.0).unwrap();
        let err = client
            .request_region(&img, &SubPrompt::new(1, "x"), 0.5)
            .unwrap_err();
        assert!(matches!(err, Error::Schema(_)), "{err:?}");
        let seen = handle.join().unwrap();
        assert_eq!(seen[0].0, "/reason");
        let body: serde_json::Value = serde_json::from_str(&seen[0].1).unwrap();
        let sent = decode_image(&B64.decode(body["image"].as_str().unwrap()).unwrap()).unwrap();
        assert_eq!(sent, img);
        assert_eq!(body["sub_prompt"]["text"], "x");
    }

    #[test]
    fn http_reasoner_happy_path() {
        let mask = Mask::from_fn(16, 16, |r, c| r < 4 && c < 8).unwrap();
        let answer = json!({"mask": B64.encode(encode_mask(&mask).unwrap())}).to_string();
        let (url, handle) = serve(1, Box::new(move |_, _| (200, answer.clone())));
        let client = ReasonerClient::new(&url, Duration::from_secs(5)).unwrap();
        let img = Image::filled(16, 16, 3, 0.5).unwrap();
        assert_eq!(
            client
                .request_region(&img, &SubPrompt::new(1, "x"), 0.5)
                .unwrap(),
            mask
        );
        handle.join().unwrap();
    }

    #[test]
    fn full_reasoner_matches_dimensions() {
        let img = Image::filled(5, 7, 3, 0.5).unwrap();
        let m = ReasonerClient::full()
            .request_region(&img, &SubPrompt::new(1, "x"), 0.5)
            .unwrap();
        assert_eq!((m.height(), m.width(), m.count()), (5, 7, 35));
    }
}
