//! Blocking HTTP adapters for OpenAI-style and Gemini-style endpoints.
//!
//! Request bodies and response decoding are plain functions over JSON so
//! they can be tested without a network.

use std::time::Duration;

use serde_json::{json, Value};

use super::{CompletionRequest, ProviderClient, ProviderError, RawBatch};

#[derive(Debug, Clone, PartialEq)]
pub struct HttpProviderConfig {
    /// Base URL, e.g. `https://api.openai.com/v1`.
    pub endpoint: String,
    pub model_id: String,
    pub api_key: String,
    pub timeout: Duration,
}

fn agent(timeout: Duration) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .http_status_as_error(false)
        .build()
        .into()
}

fn post(
    agent: &ureq::Agent,
    url: &str,
    headers: &[(&str, String)],
    body: &Value,
) -> Result<(u16, String), ProviderError> {
    let mut req = agent.post(url).header("Content-Type", "application/json");
    for (k, v) in headers {
        req = req.header(*k, v.as_str());
    }
    let mut resp = req
        .send_json(body)
        .map_err(|e| ProviderError::Transport(e.to_string()))?;
    let status = resp.status().as_u16();
    let text = resp
        .body_mut()
        .read_to_string()
        .map_err(|e| ProviderError::Transport(e.to_string()))?;
    Ok((status, text))
}

fn check_status(status: u16, body: &str) -> Result<(), ProviderError> {
    match status {
        200..=299 => Ok(()),
        401 | 403 => Err(ProviderError::Auth(format!("HTTP {status}: {body}"))),
        _ => Err(ProviderError::Http {
            status,
            body: body.to_string(),
        }),
    }
}

fn parse_json(body: &str) -> Result<Value, ProviderError> {
    serde_json::from_str(body)
        .map_err(|e| ProviderError::BadResponse(format!("response is not JSON: {e}")))
}

// ---- OpenAI-compatible ----------------------------------------------------------

#[derive(Debug)]
pub struct OpenAiCompatible {
    config: HttpProviderConfig,
    agent: ureq::Agent,
}

impl OpenAiCompatible {
    pub fn new(config: HttpProviderConfig) -> Self {
        let agent = agent(config.timeout);
        OpenAiCompatible { config, agent }
    }

    pub fn request_body(model: &str, request: &CompletionRequest<'_>) -> Value {
        let p = request.params;
        json!({
            "model": model,
            "messages": [{ "role": "user", "content": request.prompt }],
            "temperature": p.temperature,
            "top_p": p.top_p,
            "frequency_penalty": p.frequency_penalty,
            "presence_penalty": p.presence_penalty,
            "max_tokens": p.max_output_tokens,
            "response_format": {
                "type": "json_schema",
                "json_schema": { "name": "survey_records", "strict": true, "schema": request.schema }
            }
        })
    }

    pub fn decode_response(status: u16, body: &str) -> Result<RawBatch, ProviderError> {
        check_status(status, body)?;
        let v = parse_json(body)?;
        let message = &v["choices"][0]["message"];
        if let Some(refusal) = message["refusal"].as_str() {
            return Err(ProviderError::Refusal(refusal.to_string()));
        }
        let content = message["content"].as_str().ok_or_else(|| {
            ProviderError::BadResponse("missing choices[0].message.content".into())
        })?;
        let mut raw = RawBatch::new(content);
        for key in ["model", "usage", "created"] {
            if !v[key].is_null() {
                raw.provider_meta.insert(key.into(), v[key].clone());
            }
        }
        if let Some(reason) = v["choices"][0]["finish_reason"].as_str() {
            raw.provider_meta
                .insert("finish_reason".into(), json!(reason));
        }
        Ok(raw)
    }
}

impl ProviderClient for OpenAiCompatible {
    fn model_id(&self) -> &str {
        &self.config.model_id
    }

    fn complete(&self, request: &CompletionRequest<'_>) -> Result<RawBatch, ProviderError> {
        let url = format!(
            "{}/chat/completions",
            self.config.endpoint.trim_end_matches('/')
        );
        let body = Self::request_body(&self.config.model_id, request);
        let auth = [("Authorization", format!("Bearer {}", self.config.api_key))];
        let (status, text) = post(&self.agent, &url, &auth, &body)?;
        Self::decode_response(status, &text)
    }
}

// ---- Gemini-compatible ----------------------------------------------------------

#[derive(Debug)]
pub struct GeminiCompatible {
    config: HttpProviderConfig,
    agent: ureq::Agent,
}

impl GeminiCompatible {
    pub fn new(config: HttpProviderConfig) -> Self {
        let agent = agent(config.timeout);
        GeminiCompatible { config, agent }
    }

    pub fn request_body(request: &CompletionRequest<'_>) -> Value {
        let p = request.params;
        json!({
            "contents": [{ "role": "user", "parts": [{ "text": request.prompt }] }],
            "generationConfig": {
                "temperature": p.temperature,
                "topP": p.top_p,
                "maxOutputTokens": p.max_output_tokens,
                "frequencyPenalty": p.frequency_penalty,
                "presencePenalty": p.presence_penalty,
                "responseMimeType": "application/json",
                "responseJsonSchema": request.schema
            }
        })
    }

    pub fn decode_response(status: u16, body: &str) -> Result<RawBatch, ProviderError> {
        check_status(status, body)?;
        let v = parse_json(body)?;
        if let Some(reason) = v["promptFeedback"]["blockReason"].as_str() {
            return Err(ProviderError::Refusal(reason.to_string()));
        }
        let candidate = &v["candidates"][0];
        let parts = candidate["content"]["parts"].as_array().ok_or_else(|| {
            ProviderError::BadResponse("missing candidates[0].content.parts".into())
        })?;
        let text: String = parts.iter().filter_map(|p| p["text"].as_str()).collect();
        let mut raw = RawBatch::new(text);
        for key in ["modelVersion", "usageMetadata"] {
            if !v[key].is_null() {
                raw.provider_meta.insert(key.into(), v[key].clone());
            }
        }
        if let Some(reason) = candidate["finishReason"].as_str() {
            raw.provider_meta
                .insert("finish_reason".into(), json!(reason));
        }
        Ok(raw)
    }
}

impl ProviderClient for GeminiCompatible {
    fn model_id(&self) -> &str {
        &self.config.model_id
    }

    fn complete(&self, request: &CompletionRequest<'_>) -> Result<RawBatch, ProviderError> {
        let url = format!(
            "{}/models/{}:generateContent",
            self.config.endpoint.trim_end_matches('/'),
            self.config.model_id
        );
        let body = Self::request_body(request);
        let key = [("x-goog-api-key", self.config.api_key.clone())];
        let (status, text) = post(&self.agent, &url, &key, &body)?;
        Self::decode_response(status, &text)
    }
}
