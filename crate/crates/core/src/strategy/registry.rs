//! Named strategy lookup with room for user-defined strategies.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::model::{StrategyKind, STRATEGY_ALIASES};

use super::{run_strategy, Selection, StrategyError, StrategyInput};

/// A selection strategy. Implement this to plug a custom strategy into
/// [`StrategyRegistry`]; it must honour the same contract as the built-ins
/// (exactly `budget` distinct ids drawn from the input pool).
pub trait Strategy: Send + Sync {
    fn name(&self) -> &str;

    fn select(&self, input: &StrategyInput) -> Result<Selection, StrategyError>;
}

impl Strategy for StrategyKind {
    fn name(&self) -> &str {
        StrategyKind::name(self)
    }

    fn select(&self, input: &StrategyInput) -> Result<Selection, StrategyError> {
        run_strategy(*self, input)
    }
}

#[derive(Clone)]
pub struct StrategyRegistry {
    entries: BTreeMap<String, Arc<dyn Strategy>>,
}

impl Default for StrategyRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl StrategyRegistry {
    pub fn empty() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    /// All built-in strategies under every alias.
    pub fn with_builtins() -> Self {
        let mut reg = Self::empty();
        for (canonical, aliases) in STRATEGY_ALIASES {
            let kind = StrategyKind::from_alias(canonical).expect("alias table is consistent");
            let strategy: Arc<dyn Strategy> = Arc::new(kind);
            for alias in *aliases {
                reg.entries.insert((*alias).to_string(), strategy.clone());
            }
        }
        reg
    }

    /// Registers `strategy` under `name`, replacing any previous entry.
    pub fn register(&mut self, name: impl Into<String>, strategy: Arc<dyn Strategy>) {
        self.entries.insert(name.into(), strategy);
    }

    pub fn get(&self, name: &str) -> Option<Arc<dyn Strategy>> {
        self.entries.get(name).cloned()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn run(&self, name: &str, input: &StrategyInput) -> Result<Selection, StrategyError> {
        self.get(name)
            .ok_or_else(|| StrategyError::UnknownStrategy(name.to_string()))?
            .select(input)
    }
}
