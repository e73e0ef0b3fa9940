//! VLM clients: the HTTP service binding, deterministic mocks for tests
//! and offline runs, and the content-addressed response cache with
//! per-key single-flight.

use super::{parse_evidence, CotError, StageAnalysis, SubPrompt};
use crate::stage::Stage;
use sha2::Digest;
use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

/// A vision-language completion service. Implementations must be
/// deterministic for identical (image, prompt) pairs or hide their
/// nondeterminism behind the response cache.
pub trait VlmClient: Send + Sync {
    fn model_id(&self) -> &str;
    fn complete(&self, image_png: &[u8], prompt: &SubPrompt) -> Result<String, CotError>;
    /// Completed network/service calls so far (cache hits do not count).
    fn calls(&self) -> usize;
}

/// Content digest of an encoded image.
pub fn image_digest(image_png: &[u8]) -> String {
    hex::encode(&sha2::Sha256::digest(image_png)[..16])
}

/// What the deterministic mock answers for one (image, stage) pair.
#[derive(Debug, Clone)]
enum MockScript {
    /// Evidence present exactly when the prompt's stage matches the
    /// recorded ground truth for the image.
    AnswerByTruth(HashMap<String, Stage>),
    /// Fixed noncommittal prose with no stage evidence at all.
    NeverLabels,
    /// Explicit canned text per (image digest, stage).
    Canned(HashMap<(String, Stage), String>),
}

/// Deterministic in-process stand-in for the external VLM.
pub struct MockVlmClient {
    model: String,
    script: MockScript,
    calls: AtomicUsize,
}

impl MockVlmClient {
    /// Always answers "present" for the ground-truth stage of each image
    /// and "absent" otherwise.
    pub fn always_correct(truths: impl IntoIterator<Item = (String, Stage)>) -> MockVlmClient {
        MockVlmClient {
            model: "mock-correct".into(),
            script: MockScript::AnswerByTruth(truths.into_iter().collect()),
            calls: AtomicUsize::new(0),
        }
    }

    /// Never names a stage and never reports evidence.
    pub fn never_labels() -> MockVlmClient {
        MockVlmClient {
            model: "mock-never".into(),
            script: MockScript::NeverLabels,
            calls: AtomicUsize::new(0),
        }
    }

    /// Returns canned text verbatim, keyed by (image digest, stage).
    pub fn canned(answers: HashMap<(String, Stage), String>) -> MockVlmClient {
        MockVlmClient {
            model: "mock-canned".into(),
            script: MockScript::Canned(answers),
            calls: AtomicUsize::new(0),
        }
    }
}

impl VlmClient for MockVlmClient {
    fn model_id(&self) -> &str {
        &self.model
    }

    fn complete(&self, image_png: &[u8], prompt: &SubPrompt) -> Result<String, CotError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let digest = image_digest(image_png);
        match &self.script {
            MockScript::AnswerByTruth(truths) => {
                let truth = truths.get(&digest).copied();
                let present = truth == Some(prompt.stage);
                Ok(format!(
                    "Reviewing the epoch for {} features. Conclusion: {}",
                    prompt.stage,
                    if present { "present" } else { "absent" }
                ))
            }
            MockScript::NeverLabels => {
                Ok("The tracing shows some activity that is hard to characterize.".to_string())
            }
            MockScript::Canned(answers) => answers
                .get(&(digest.clone(), prompt.stage))
                .cloned()
                .ok_or_else(|| {
                    CotError::MalformedResponse(format!(
                        "no canned answer for image {digest} stage {}",
                        prompt.stage
                    ))
                }),
        }
    }

    fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

/// Test double that fails transiently a fixed number of times, then
/// delegates to an inner client.
pub struct FlakyClient<C: VlmClient> {
    inner: C,
    failures_left: Mutex<usize>,
    calls: AtomicUsize,
}

impl<C: VlmClient> FlakyClient<C> {
    pub fn new(inner: C, failures: usize) -> FlakyClient<C> {
        FlakyClient { inner, failures_left: Mutex::new(failures), calls: AtomicUsize::new(0) }
    }
}

impl<C: VlmClient> VlmClient for FlakyClient<C> {
    fn model_id(&self) -> &str {
        self.inner.model_id()
    }

    fn complete(&self, image_png: &[u8], prompt: &SubPrompt) -> Result<String, CotError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        {
            let mut left = self.failures_left.lock().unwrap();
            if *left > 0 {
                *left -= 1;
                return Err(CotError::ServiceUnavailable {
                    attempts: 1,
                    last_error: "injected transient fault".into(),
                });
            }
        }
        self.inner.complete(image_png, prompt)
    }

    fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

/// HTTP binding: JSON request {model, prompt, image (base64 PNG)} in,
/// JSON response {answer} out. API key comes from the configured
/// environment variable.
#[derive(Debug, Clone)]
pub struct HttpVlmConfig {
    pub endpoint: String,
    pub model: String,
    pub api_key_env: String,
    pub timeout: Duration,
    pub max_retries: usize,
    /// Requests per minute ceiling; 0 disables the limiter.
    pub rate_limit_per_min: u32,
}

impl Default for HttpVlmConfig {
    fn default() -> Self {
        HttpVlmConfig {
            endpoint: String::new(),
            model: "gpt-4".into(),
            api_key_env: "SOMNIA_VLM_API_KEY".into(),
            timeout: Duration::from_secs(60),
            max_retries: 3,
            rate_limit_per_min: 0,
        }
    }
}

pub struct HttpVlmClient {
    config: HttpVlmConfig,
    agent: ureq::Agent,
    calls: AtomicUsize,
    last_request: Mutex<Option<std::time::Instant>>,
}

impl HttpVlmClient {
    pub fn new(config: HttpVlmConfig) -> HttpVlmClient {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .build()
            .into();
        HttpVlmClient { config, agent, calls: AtomicUsize::new(0), last_request: Mutex::new(None) }
    }

    fn respect_rate_limit(&self) {
        if self.config.rate_limit_per_min == 0 {
            return;
        }
        let interval = Duration::from_secs_f64(60.0 / self.config.rate_limit_per_min as f64);
        let mut last = self.last_request.lock().unwrap();
        if let Some(at) = *last {
            let elapsed = at.elapsed();
            if elapsed < interval {
                std::thread::sleep(interval - elapsed);
            }
        }
        *last = Some(std::time::Instant::now());
    }
}

impl VlmClient for HttpVlmClient {
    fn model_id(&self) -> &str {
        &self.config.model
    }

    fn complete(&self, image_png: &[u8], prompt: &SubPrompt) -> Result<String, CotError> {
        self.respect_rate_limit();
        self.calls.fetch_add(1, Ordering::SeqCst);
        let api_key = std::env::var(&self.config.api_key_env).map_err(|_| {
            CotError::ServiceUnavailable {
                attempts: 1,
                last_error: format!("API key env var {} is not set", self.config.api_key_env),
            }
        })?;
        let body = serde_json::json!({
            "model": self.config.model,
            "prompt": prompt.prompt_text,
            "image": base64_encode(image_png),
        });
        let response = self
            .agent
            .post(&self.config.endpoint)
            .header("authorization", &format!("Bearer {api_key}"))
            .send_json(&body)
            .map_err(|e| CotError::ServiceUnavailable { attempts: 1, last_error: e.to_string() })?;
        let value: serde_json::Value = response
            .into_body()
            .read_json()
            .map_err(|e| CotError::MalformedResponse(e.to_string()))?;
        value
            .get("answer")
            .and_then(|a| a.as_str())
            .map(|s| s.to_string())
            .ok_or_else(|| CotError::MalformedResponse("response lacks an \"answer\" field".into()))
    }

    fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

fn base64_encode(bytes: &[u8]) -> String {
    const TABLE: &[u8; 64] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    let mut out = String::with_capacity(bytes.len().div_ceil(3) * 4);
    for chunk in bytes.chunks(3) {
        let b = [chunk[0], *chunk.get(1).unwrap_or(&0), *chunk.get(2).unwrap_or(&0)];
        let n = ((b[0] as u32) << 16) | ((b[1] as u32) << 8) | b[2] as u32;
        out.push(TABLE[(n >> 18) as usize & 63] as char);
        out.push(TABLE[(n >> 12) as usize & 63] as char);
        out.push(if chunk.len() > 1 { TABLE[(n >> 6) as usize & 63] as char } else { '=' });
        out.push(if chunk.len() > 2 { TABLE[n as usize & 63] as char } else { '=' });
    }
    out
}

/// Content-addressed response cache keyed by (model id, image digest,
/// prompt digest). Writes are atomic (temp file + rename) and a per-key
/// lock table keeps concurrent misses single-flight.
pub struct ResponseCache {
    dir: PathBuf,
    in_flight: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> ResponseCache {
        ResponseCache { dir: dir.into(), in_flight: Mutex::new(HashMap::new()) }
    }

    pub fn key(model_id: &str, image_png: &[u8], prompt: &SubPrompt) -> String {
        let mut hasher = sha2::Sha256::new();
        hasher.update(model_id.as_bytes());
        hasher.update(b"\x00");
        hasher.update(image_digest(image_png).as_bytes());
        hasher.update(b"\x00");
        hasher.update(prompt.digest().as_bytes());
        hex::encode(&hasher.finalize()[..16])
    }

    fn path_of(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.txt"))
    }

    pub fn get(&self, key: &str) -> Option<String> {
        std::fs::read_to_string(self.path_of(key)).ok()
    }

    pub fn put(&self, key: &str, value: &str) -> Result<(), CotError> {
        std::fs::create_dir_all(&self.dir)
            .map_err(|source| CotError::Io { path: self.dir.clone(), source })?;
        let tmp = self.dir.join(format!(".{key}.tmp"));
        std::fs::write(&tmp, value).map_err(|source| CotError::Io { path: tmp.clone(), source })?;
        std::fs::rename(&tmp, self.path_of(key))
            .map_err(|source| CotError::Io { path: self.path_of(key), source })?;
        Ok(())
    }

    fn lock_key(&self, key: &str) -> Arc<Mutex<()>> {
        let mut table = self.in_flight.lock().unwrap();
        table.entry(key.to_string()).or_insert_with(|| Arc::new(Mutex::new(()))).clone()
    }
}

/// Query one sub-prompt. Served from the cache when possible; otherwise
/// the client is called with exponential backoff on transient failures
/// and the response is cached. Identical keys never query twice.
pub fn query_vlm(
    client: &dyn VlmClient,
    cache: &ResponseCache,
    image_png: &[u8],
    prompt: &SubPrompt,
    max_retries: usize,
    backoff_base: Duration,
) -> Result<StageAnalysis, CotError> {
    let key = ResponseCache::key(client.model_id(), image_png, prompt);
    let text = match cache.get(&key) {
        Some(hit) => hit,
        None => {
            let lock = cache.lock_key(&key);
            let _guard = lock.lock().unwrap();
            // A concurrent flight may have landed while we waited.
            match cache.get(&key) {
                Some(hit) => hit,
                None => {
                    let mut last_error = String::new();
                    let mut result = None;
                    for attempt in 0..=max_retries {
                        match client.complete(image_png, prompt) {
                            Ok(answer) => {
                                result = Some(answer);
                                break;
                            }
                            Err(CotError::ServiceUnavailable { last_error: e, .. }) => {
                                last_error = e;
                                if attempt < max_retries && !backoff_base.is_zero() {
                                    std::thread::sleep(backoff_base * 2u32.pow(attempt as u32));
                                }
                            }
                            Err(other) => return Err(other),
                        }
                    }
                    let answer = result.ok_or(CotError::ServiceUnavailable {
                        attempts: max_retries + 1,
                        last_error,
                    })?;
                    if answer.trim().is_empty() {
                        return Err(CotError::MalformedResponse("empty answer".into()));
                    }
                    cache.put(&key, &answer)?;
                    answer
                }
            }
        }
    };
    Ok(StageAnalysis {
        stage: prompt.stage,
        evidence_flag: parse_evidence(&text),
        analysis_text: text,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cot::build_stage_prompts;

    fn n2_prompt() -> SubPrompt {
        build_stage_prompts().unwrap()[Stage::N2.index()].clone()
    }

    #[test]
    fn canned_mock_returns_text_verbatim() {
        let image = b"fake png bytes";
        let digest = image_digest(image);
        let mut answers = HashMap::new();
        answers.insert((digest, Stage::N2), "Spindle city. Conclusion: present".to_string());
        let client = MockVlmClient::canned(answers);
        let text = client.complete(image, &n2_prompt()).unwrap();
        assert_eq!(text, "Spindle city. Conclusion: present");
    }

    #[test]
    fn second_identical_call_hits_the_cache() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::new(dir.path());
        let image = b"imgbytes";
        let truths = [(image_digest(image), Stage::N2)];
        let client = MockVlmClient::always_correct(truths);
        let prompt = n2_prompt();

        let first = query_vlm(&client, &cache, image, &prompt, 3, Duration::ZERO).unwrap();
        assert_eq!(client.calls(), 1);
        let second = query_vlm(&client, &cache, image, &prompt, 3, Duration::ZERO).unwrap();
        assert_eq!(client.calls(), 1, "cache hit must not call the service");
        assert_eq!(first, second);
        assert!(first.evidence_flag);
    }

    #[test]
    fn transient_faults_are_retried_to_the_same_answer() {
        let image = b"imgbytes";
        let truths = [(image_digest(image), Stage::N2)];
        let prompt = n2_prompt();

        let clean_dir = tempfile::tempdir().unwrap();
        let clean_cache = ResponseCache::new(clean_dir.path());
        let clean = MockVlmClient::always_correct(truths.clone());
        let want = query_vlm(&clean, &clean_cache, image, &prompt, 0, Duration::ZERO).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::new(dir.path());
        let flaky = FlakyClient::new(MockVlmClient::always_correct(truths), 2);
        let got = query_vlm(&flaky, &cache, image, &prompt, 3, Duration::ZERO).unwrap();
        assert_eq!(flaky.calls(), 3, "two faults then success");
        assert_eq!(got, want);
    }

    #[test]
    fn exhausted_retries_surface_service_unavailable() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::new(dir.path());
        let flaky = FlakyClient::new(MockVlmClient::never_labels(), 10);
        let err = query_vlm(&flaky, &cache, b"img", &n2_prompt(), 2, Duration::ZERO).unwrap_err();
        assert!(matches!(err, CotError::ServiceUnavailable { attempts: 3, .. }));
    }

    #[test]
    fn cached_and_fresh_responses_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::new(dir.path());
        let image = b"imgbytes2";
        let truths = [(image_digest(image), Stage::N3)];
        let client = MockVlmClient::always_correct(truths);
        let prompt = build_stage_prompts().unwrap()[Stage::N3.index()].clone();
        let fresh = query_vlm(&client, &cache, image, &prompt, 0, Duration::ZERO).unwrap();
        let key = ResponseCache::key(client.model_id(), image, &prompt);
        assert_eq!(cache.get(&key).unwrap(), fresh.analysis_text);
    }

    #[test]
    fn base64_known_vectors() {
        assert_eq!(base64_encode(b""), "");
        assert_eq!(base64_encode(b"f"), "Zg==");
        assert_eq!(base64_encode(b"fo"), "Zm8=");
        assert_eq!(base64_encode(b"foo"), "Zm9v");
        assert_eq!(base64_encode(b"foobar"), "Zm9vYmFy");
    }
}
