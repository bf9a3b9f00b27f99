//! Provider wrapper that records every successful reply into a [`ScriptFile`].

use parking_lot::Mutex;
use tmem_core::llm::{ChatProvider, ProviderError, Role, ScriptFile};

pub struct RecordingProvider<P> {
    inner: P,
    script: Mutex<ScriptFile>,
}

impl<P: ChatProvider> RecordingProvider<P> {
    pub fn new(inner: P) -> Self {
        RecordingProvider { inner, script: Mutex::new(ScriptFile::new()) }
    }

    pub fn script(&self) -> ScriptFile {
        self.script.lock().clone()
    }
}

impl<P: ChatProvider> ChatProvider for RecordingProvider<P> {
    fn chat(&self, role: Role, model: Option<&str>, prompt: &str, temperature: f64) -> Result<String, ProviderError> {
        let reply = self.inner.chat(role, model, prompt, temperature)?;
        if let Ok(payload) = serde_json::from_str(&reply) {
            self.script.lock().insert(role, prompt, payload);
        }
        Ok(reply)
    }
}
