//! Staged class-description prompting: builds the four-stage prompt, parses
//! tagged replies, and optionally fetches descriptions from a
//! chat-completions-style endpoint.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Environment variable holding the bearer token. The token never appears in
/// config files or CLI flags.
pub const AUTH_TOKEN_ENV: &str = "VOLIGN_API_TOKEN";

#[derive(Debug, Error)]
pub enum CipError {
    #[error("class name is empty")]
    EmptyClassName,
    #[error("missing stages: {}", .0.join(", "))]
    MissingStage(Vec<String>),
    #[error("malformed tags: {0}")]
    MalformedTags(String),
    #[error("invalid client config: {0}")]
    InvalidConfig(String),
    #[error("network error: {0}")]
    Network(String),
    #[error("endpoint returned status {0}")]
    HttpStatus(u16),
    #[error("response is not a chat completion: {0}")]
    BadResponse(String),
}

/// Which tag set the prompt and parser use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PromptVariant {
    /// STRATEGY / PERCEPTION / REFINEMENT / CONCLUSION.
    MainText,
    /// SUMMARY / CAPTION / REASONING / CONCLUSION (the verbatim template).
    AppendixTemplate,
}

impl Default for PromptVariant {
    fn default() -> Self {
        PromptVariant::AppendixTemplate
    }
}

impl PromptVariant {
    pub fn tags(self) -> [&'static str; 4] {
        match self {
            PromptVariant::MainText => ["STRATEGY", "PERCEPTION", "REFINEMENT", "CONCLUSION"],
            PromptVariant::AppendixTemplate => ["SUMMARY", "CAPTION", "REASONING", "CONCLUSION"],
        }
    }
}

/// A parsed class description. `class_name` is empty when the descriptor was
/// recovered from raw model output rather than built locally.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDescriptor {
    pub class_name: String,
    pub stage_outputs: BTreeMap<String, String>,
    pub conclusion: String,
    /// Set when tags appeared balanced but out of template order.
    pub order_warning: Option<String>,
}

impl ClassDescriptor {
    pub fn is_complete(&self, variant: PromptVariant) -> bool {
        variant
            .tags()
            .iter()
            .all(|t| self.stage_outputs.contains_key(*t))
            && !self.conclusion.trim().is_empty()
    }
}

/// Endpoint settings for [`request_description`]. The token is injected by
/// the caller (read from [`AUTH_TOKEN_ENV`]), never stored on disk.
#[derive(Debug, Clone)]
pub struct ClientConfig {
    pub endpoint: String,
    pub model: String,
    pub auth_token: String,
    pub timeout: Duration,
    pub max_retries: u32,
    pub backoff: Duration,
}

impl ClientConfig {
    pub fn new(endpoint: &str, model: &str, auth_token: &str) -> Result<Self, CipError> {
        let cfg = ClientConfig {
            endpoint: endpoint.to_string(),
            model: model.to_string(),
            auth_token: auth_token.to_string(),
            timeout: Duration::from_secs(30),
            max_retries: 3,
            backoff: Duration::from_millis(100),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CipError> {
        if !(self.endpoint.starts_with("http://") || self.endpoint.starts_with("https://")) {
            return Err(CipError::InvalidConfig(format!(
                "endpoint must be an http(s) URL, got {:?}",
                self.endpoint
            )));
        }
        if self.timeout.is_zero() {
            return Err(CipError::InvalidConfig("timeout must be positive".into()));
        }
        Ok(())
    }
}

const STAGE_INSTRUCTIONS: [&str; 4] = [
    "Briefly describe your overall approach: interpret the class name, \
     analyze the image content to validate or refine the interpretation, \
     and formulate a revised description from both sources.",
    "Describe common visual elements observed across all images that help \
     clarify the concept, such as objects, shapes, textures, colors, or \
     background environments.",
    "Explain how the visual patterns confirm or adjust the class meaning, \
     especially if it is ambiguous, polysemous, or abstract. Use \
     step-by-step reasoning to refine the concept.",
    "Rewrite the class definition as a concise, scientifically sound, and \
     visually consistent paragraph. Avoid redundancy; prioritize clarity \
     and relevance.",
];

/// Build the staged prompt. Deterministic for fixed inputs; image references
/// are passed through untouched.
pub fn build_prompt(
    class_name: &str,
    image_refs: &[String],
    variant: PromptVariant,
) -> Result<String, CipError> {
    if class_name.trim().is_empty() {
        return Err(CipError::EmptyClassName);
    }
    let mut out = String::new();
    out.push_str(
        "You are an expert in computer vision and concept definition.\n\n\
         Given a class name and a set of representative images, generate a \
         brief, scientifically accurate, and visually grounded definition. \
         The definition should be primarily guided by the semantic meaning \
         of the class name, and refined using the visual evidence from the \
         images.\n\nPlease strictly follow the structured reasoning format \
         below:\n\n",
    );
    for (tag, instruction) in variant.tags().iter().zip(STAGE_INSTRUCTIONS) {
        out.push_str(&format!("<{tag}>\n{instruction}\n</{tag}>\n\n"));
    }
    out.push_str(&format!("Class Name: {class_name}\n"));
    if image_refs.is_empty() {
        out.push_str("Images: none attached\n");
    } else {
        out.push_str(&format!("Images: {}\n", image_refs.join(", ")));
    }
    Ok(out)
}

/// Extract the stage bodies from a tagged reply.
///
/// Tags are matched by identity, so a balanced but reordered reply still
/// parses; the deviation is recorded in `order_warning`.
pub fn parse_stages(output: &str, variant: PromptVariant) -> Result<ClassDescriptor, CipError> {
    let tags = variant.tags();
    let mut missing = Vec::new();
    let mut bodies = BTreeMap::new();
    let mut open_positions = Vec::new();
    for tag in tags {
        let open = format!("<{tag}>");
        let close = format!("</{tag}>");
        let opens: Vec<usize> = output.match_indices(&open).map(|(i, _)| i).collect();
        let closes: Vec<usize> = output.match_indices(&close).map(|(i, _)| i).collect();
        match (opens.len(), closes.len()) {
            (0, 0) => missing.push(tag.to_string()),
            (1, 1) if opens[0] < closes[0] => {
                let body = &output[opens[0] + open.len()..closes[0]];
                bodies.insert(tag.to_string(), body.trim().to_string());
                open_positions.push((opens[0], tag));
            }
            (1, 1) => {
                return Err(CipError::MalformedTags(format!(
                    "{close} appears before {open}"
                )))
            }
            (o, c) if o != c => {
                return Err(CipError::MalformedTags(format!(
                    "{tag}: {o} opening vs {c} closing tags"
                )))
            }
            (o, _) => {
                return Err(CipError::MalformedTags(format!(
                    "{tag} appears {o} times"
                )))
            }
        }
    }
    if !missing.is_empty() {
        return Err(CipError::MissingStage(missing));
    }
    let order_warning = if open_positions.windows(2).any(|w| w[0].0 > w[1].0) {
        let seen: Vec<&str> = {
            let mut by_pos = open_positions.clone();
            by_pos.sort_by_key(|(p, _)| *p);
            by_pos.iter().map(|(_, t)| *t).collect()
        };
        Some(format!(
            "stages out of template order: found {}",
            seen.join(" -> ")
        ))
    } else {
        None
    };
    let conclusion = bodies.get("CONCLUSION").cloned().unwrap_or_default();
    Ok(ClassDescriptor {
        class_name: String::new(),
        stage_outputs: bodies,
        conclusion,
        order_warning,
    })
}

/// POST the prompt to a chat-completions endpoint and parse the first
/// choice's message content. Retries with exponential backoff on transport
/// errors and 5xx statuses; other statuses fail immediately.
pub fn request_description(
    cfg: &ClientConfig,
    prompt: &str,
    variant: PromptVariant,
) -> Result<ClassDescriptor, CipError> {
    cfg.validate()?;
    let agent = ureq::AgentBuilder::new().timeout(cfg.timeout).build();
    let body = serde_json::json!({
        "model": cfg.model,
        "messages": [{"role": "user", "content": prompt}],
    });
    let mut last_err = CipError::Network("no attempts made".into());
    for attempt in 0..=cfg.max_retries {
        if attempt > 0 {
            std::thread::sleep(cfg.backoff * 2u32.pow(attempt - 1));
        }
        let resp = agent
            .post(&cfg.endpoint)
            .set("Authorization", &format!("Bearer {}", cfg.auth_token))
            .send_json(body.clone());
        match resp {
            Ok(r) => {
                let v: serde_json::Value = r
                    .into_json()
                    .map_err(|e| CipError::BadResponse(e.to_string()))?;
                let content = v["choices"][0]["message"]["content"]
                    .as_str()
                    .ok_or_else(|| {
                        CipError::BadResponse(
                            "missing choices[0].message.content".into(),
                        )
                    })?;
                return parse_stages(content, variant);
            }
            Err(ureq::Error::Status(code, _)) if (500..600).contains(&code) => {
                last_err = CipError::HttpStatus(code);
            }
            Err(ureq::Error::Status(code, _)) => return Err(CipError::HttpStatus(code)),
            Err(ureq::Error::Transport(t)) => {
                last_err = CipError::Network(t.to_string());
            }
        }
    }
    Err(last_err)
}

pub mod mock {
    //! In-process chat-completions endpoint for tests: scripted per-request
    //! status codes, then a fixed body. No network access beyond loopback.

    use std::io::{Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    pub struct MockEndpoint {
        pub url: String,
        pub hits: Arc<AtomicUsize>,
        handle: Option<std::thread::JoinHandle<()>>,
    }

    impl MockEndpoint {
        /// Serve `statuses[i]` for the i-th request; 200 responses carry
        /// `content` wrapped in a chat-completion envelope. Extra requests
        /// beyond the script are answered 500.
        pub fn serve(statuses: Vec<u16>, content: String) -> MockEndpoint {
            let listener = TcpListener::bind("127.0.0.1:0").unwrap();
            let url = format!("http://{}", listener.local_addr().unwrap());
            let hits = Arc::new(AtomicUsize::new(0));
            let hits2 = hits.clone();
            let n = statuses.len();
            let handle = std::thread::spawn(move || {
                for i in 0..n {
                    let (mut stream, _) = listener.accept().unwrap();
                    let _ = read_request(&mut stream);
                    hits2.fetch_add(1, Ordering::SeqCst);
                    let status = statuses[i];
                    let body = if status == 200 {
                        serde_json::json!({
                            "choices": [{"message": {"role": "assistant", "content": content}}]
                        })
                        .to_string()
                    } else {
                        "{\"error\": \"scripted failure\"}".to_string()
                    };
                    let reason = if status == 200 { "OK" } else { "Error" };
                    let resp = format!(
                        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\n\
                         Content-Length: {}\r\nConnection: close\r\n\r\n{body}",
                        body.len()
                    );
                    let _ = stream.write_all(resp.as_bytes());
                }
            });
            MockEndpoint {
                url,
                hits,
                handle: Some(handle),
            }
        }
    }

    impl Drop for MockEndpoint {
        fn drop(&mut self) {
            if let Some(h) = self.handle.take() {
                let _ = h.join();
            }
        }
    }

    fn read_request(stream: &mut std::net::TcpStream) -> Vec<u8> {
        let mut buf = Vec::new();
        let mut chunk = [0u8; 1024];
        loop {
            let n = stream.read(&mut chunk).unwrap_or(0);
            if n == 0 {
                break;
            }
            buf.extend_from_slice(&chunk[..n]);
            if let Some(pos) = find_header_end(&buf) {
                let headers = String::from_utf8_lossy(&buf[..pos]);
                let body_len: usize = headers
                    .lines()
                    .find_map(|l| {
                        l.to_ascii_lowercase()
                            .strip_prefix("content-length:")
                            .map(|v| v.trim().parse().unwrap_or(0))
                    })
                    .unwrap_or(0);
                if buf.len() >= pos + 4 + body_len {
                    break;
                }
            }
        }
        buf
    }

    fn find_header_end(buf: &[u8]) -> Option<usize> {
        buf.windows(4).position(|w| w == b"\r\n\r\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn staged_reply(variant: PromptVariant, bodies: [&str; 4]) -> String {
        variant
            .tags()
            .iter()
            .zip(bodies)
            .map(|(t, b)| format!("<{t}>\n{b}\n</{t}>\n"))
            .collect()
    }

    #[test]
    fn build_prompt_has_all_tags_in_order() {
        for variant in [PromptVariant::MainText, PromptVariant::AppendixTemplate] {
            let p = build_prompt("robin", &["img0.png".into()], variant).unwrap();
            let mut last = 0;
            for tag in variant.tags() {
                let open = p.find(&format!("<{tag}>")).expect("open tag present");
                let close = p.find(&format!("</{tag}>")).expect("close tag present");
                assert!(open < close);
                assert!(open >= last, "{tag} out of order");
                last = open;
                assert_eq!(p.matches(&format!("<{tag}>")).count(), 1);
                assert_eq!(p.matches(&format!("</{tag}>")).count(), 1);
            }
            assert!(p.contains("robin"));
            assert!(p.contains("img0.png"));
        }
    }

    #[test]
    fn build_prompt_is_deterministic() {
        let a = build_prompt("lynx", &[], PromptVariant::default()).unwrap();
        let b = build_prompt("lynx", &[], PromptVariant::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn build_prompt_rejects_empty_class_name() {
        assert!(matches!(
            build_prompt("", &[], PromptVariant::default()),
            Err(CipError::EmptyClassName)
        ));
        assert!(matches!(
            build_prompt("   ", &[], PromptVariant::default()),
            Err(CipError::EmptyClassName)
        ));
    }

    #[test]
    fn parse_inverts_well_formed_replies() {
        let bodies = ["plan things", "red breast, gray back", "it is a bird", "A songbird."];
        for variant in [PromptVariant::MainText, PromptVariant::AppendixTemplate] {
            let reply = staged_reply(variant, bodies);
            let d = parse_stages(&reply, variant).unwrap();
            for (tag, body) in variant.tags().iter().zip(bodies) {
                assert_eq!(d.stage_outputs[*tag], body);
            }
            assert_eq!(d.conclusion, "A songbird.");
            assert!(d.is_complete(variant));
            assert!(d.order_warning.is_none());
        }
    }

    #[test]
    fn parse_reports_missing_stages() {
        let out = "<SUMMARY>a</SUMMARY><CONCLUSION>b</CONCLUSION>";
        match parse_stages(out, PromptVariant::AppendixTemplate) {
            Err(CipError::MissingStage(tags)) => {
                assert_eq!(tags, vec!["CAPTION".to_string(), "REASONING".to_string()]);
            }
            other => panic!("expected MissingStage, got {other:?}"),
        }
        // prose without any tags lists all four
        match parse_stages("just some prose", PromptVariant::AppendixTemplate) {
            Err(CipError::MissingStage(tags)) => assert_eq!(tags.len(), 4),
            other => panic!("expected MissingStage, got {other:?}"),
        }
    }

    #[test]
    fn parse_rejects_unbalanced_tags() {
        let out = "<SUMMARY>a</SUMMARY><CAPTION>b</CAPTION>\
                   <REASONING>c</REASONING><CONCLUSION>d";
        assert!(matches!(
            parse_stages(out, PromptVariant::AppendixTemplate),
            Err(CipError::MalformedTags(_))
        ));
        let swapped = "</SUMMARY>a<SUMMARY><CAPTION>b</CAPTION>\
                       <REASONING>c</REASONING><CONCLUSION>d</CONCLUSION>";
        assert!(matches!(
            parse_stages(swapped, PromptVariant::AppendixTemplate),
            Err(CipError::MalformedTags(_))
        ));
    }

    #[test]
    fn parse_accepts_reordered_balanced_tags_with_warning() {
        let out = "<CAPTION>b</CAPTION><SUMMARY>a</SUMMARY>\
                   <REASONING>c</REASONING><CONCLUSION>d</CONCLUSION>";
        let d = parse_stages(out, PromptVariant::AppendixTemplate).unwrap();
        assert_eq!(d.stage_outputs["SUMMARY"], "a");
        assert_eq!(d.stage_outputs["CAPTION"], "b");
        let warn = d.order_warning.expect("order warning set");
        assert!(warn.contains("CAPTION -> SUMMARY"));
    }

    #[test]
    fn incomplete_without_conclusion_body() {
        let out = "<SUMMARY>a</SUMMARY><CAPTION>b</CAPTION>\
                   <REASONING>c</REASONING><CONCLUSION>   </CONCLUSION>";
        let d = parse_stages(out, PromptVariant::AppendixTemplate).unwrap();
        assert!(!d.is_complete(PromptVariant::AppendixTemplate));
    }

    #[test]
    fn client_config_validation() {
        assert!(ClientConfig::new("ftp://x", "m", "t").is_err());
        assert!(ClientConfig::new("http://localhost:1", "m", "t").is_ok());
        let mut cfg = ClientConfig::new("http://localhost:1", "m", "t").unwrap();
        cfg.timeout = Duration::ZERO;
        assert!(cfg.validate().is_err());
    }

    fn test_client(url: &str) -> ClientConfig {
        let mut cfg = ClientConfig::new(url, "test-model", "test-token").unwrap();
        cfg.timeout = Duration::from_secs(5);
        cfg.backoff = Duration::from_millis(1);
        cfg
    }

    #[test]
    fn mock_round_trip_succeeds() {
        let variant = PromptVariant::AppendixTemplate;
        let reply = staged_reply(variant, ["s", "c", "r", "done"]);
        let ep = mock::MockEndpoint::serve(vec![200], reply);
        let d = request_description(&test_client(&ep.url), "prompt", variant).unwrap();
        assert!(d.is_complete(variant));
        assert_eq!(d.conclusion, "done");
    }

    #[test]
    fn retries_through_two_failures() {
        let variant = PromptVariant::AppendixTemplate;
        let reply = staged_reply(variant, ["s", "c", "r", "done"]);
        let ep = mock::MockEndpoint::serve(vec![500, 500, 200], reply);
        let d = request_description(&test_client(&ep.url), "prompt", variant).unwrap();
        assert!(d.is_complete(variant));
        assert_eq!(ep.hits.load(std::sync::atomic::Ordering::SeqCst), 3);
    }

    #[test]
    fn exhausted_retries_surface_last_status() {
        let ep = mock::MockEndpoint::serve(vec![500, 500, 500, 500], String::new());
        let mut cfg = test_client(&ep.url);
        cfg.max_retries = 3;
        match request_description(&cfg, "prompt", PromptVariant::default()) {
            Err(CipError::HttpStatus(500)) => {}
            other => panic!("expected HttpStatus(500), got {other:?}"),
        }
        assert_eq!(ep.hits.load(std::sync::atomic::Ordering::SeqCst), 4);
    }

    #[test]
    fn client_errors_do_not_retry() {
        let ep = mock::MockEndpoint::serve(vec![401], String::new());
        match request_description(&test_client(&ep.url), "prompt", PromptVariant::default()) {
            Err(CipError::HttpStatus(401)) => {}
            other => panic!("expected HttpStatus(401), got {other:?}"),
        }
        assert_eq!(ep.hits.load(std::sync::atomic::Ordering::SeqCst), 1);
    }

    #[test]
    fn untagged_reply_is_a_parse_error() {
        let ep = mock::MockEndpoint::serve(vec![200], "plain prose, no tags".into());
        assert!(matches!(
            request_description(&test_client(&ep.url), "prompt", PromptVariant::default()),
            Err(CipError::MissingStage(_))
        ));
    }
}
