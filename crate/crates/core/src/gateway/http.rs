//! Live transport: HTTP POST of the request bytes to the endpoint URL.

use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::header::{AUTHORIZATION, CONTENT_TYPE};

use super::{EndpointConfig, Transport, TransportError};

pub struct HttpTransport {
    client: Client,
}

impl HttpTransport {
    pub fn new() -> Result<Self, reqwest::Error> {
        Ok(Self {
            client: Client::builder().build()?,
        })
    }
}

impl Transport for HttpTransport {
    fn send(&self, endpoint: &EndpointConfig, body: &[u8]) -> Result<Vec<u8>, TransportError> {
        if endpoint.base_url.is_empty() {
            return Err(TransportError::Status(
                400,
                format!("endpoint {} has no base_url", endpoint.endpoint_id),
            ));
        }
        let mut req = self
            .client
            .post(&endpoint.base_url)
            .header(CONTENT_TYPE, "application/json")
            .timeout(Duration::from_millis(endpoint.timeout_ms))
            .body(body.to_vec());
        if let Ok(token) = std::env::var(&endpoint.auth_env_var) {
            req = req.header(AUTHORIZATION, format!("Bearer {token}"));
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                TransportError::Timeout
            } else {
                TransportError::Network(e.to_string())
            }
        })?;
        let status = resp.status();
        let bytes = resp.bytes().map_err(|e| {
            if e.is_timeout() {
                TransportError::Timeout
            } else {
                TransportError::Network(e.to_string())
            }
        })?;
        if status.is_success() {
            Ok(bytes.to_vec())
        } else {
            let snippet: String = String::from_utf8_lossy(&bytes).chars().take(200).collect();
            Err(TransportError::Status(status.as_u16(), snippet))
        }
    }
}
