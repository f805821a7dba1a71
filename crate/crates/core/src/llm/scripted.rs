use std::collections::VecDeque;
use std::path::Path;
use std::sync::Mutex;

use super::{CompletionProvider, CompletionRequest, LlmError};

/// Replays canned responses in FIFO order. Used for offline, deterministic runs.
#[derive(Debug, Default)]
pub struct ScriptedProvider {
    state: Mutex<State>,
}

#[derive(Debug, Default)]
struct State {
    queue: VecDeque<String>,
    requests: Vec<CompletionRequest>,
}

impl ScriptedProvider {
    pub fn new<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            state: Mutex::new(State {
                queue: responses.into_iter().map(Into::into).collect(),
                requests: Vec::new(),
            }),
        }
    }

    /// Loads a JSON array of strings.
    pub fn from_file(path: &Path) -> Result<Self, LlmError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LlmError::Provider(format!("cannot read script {}: {e}", path.display())))?;
        let responses: Vec<String> = serde_json::from_str(&text).map_err(|e| {
            LlmError::Provider(format!("script {} is not a JSON array of strings: {e}", path.display()))
        })?;
        Ok(Self::new(responses))
    }

    pub fn calls(&self) -> usize {
        self.state.lock().unwrap().requests.len()
    }

    pub fn remaining(&self) -> usize {
        self.state.lock().unwrap().queue.len()
    }

    pub fn requests(&self) -> Vec<CompletionRequest> {
        self.state.lock().unwrap().requests.clone()
    }
}

impl CompletionProvider for ScriptedProvider {
    fn complete(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        let mut state = self.state.lock().unwrap();
        state.requests.push(request.clone());
        state
            .queue
            .pop_front()
            .ok_or_else(|| LlmError::Provider("scripted provider has no responses left".into()))
    }
}
