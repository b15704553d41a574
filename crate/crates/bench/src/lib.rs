//! Shared inputs for the benchmarks: an untrained default-geometry model
//! and one batch of forget examples with its unlearning task.

use auvic_core::advgen::default_prompt_templates;
use auvic_core::anchor::AnchorConfig;
use auvic_core::data::{unlearn_data, DataConfig, Example, Prompts};
use auvic_core::model::{Geometry, ModelState, Vocab};
use auvic_core::unlearn::UnlearnTask;
use auvic_core::vcubench::{default_query_templates, make_roster};

pub struct Setup {
    pub state: ModelState,
    pub task: UnlearnTask,
}

impl Setup {
    pub fn new(seed: u64) -> Self {
        let roster = make_roster(8, 2, seed).expect("roster");
        let prompts = Prompts::new(&default_query_templates(), default_prompt_templates()).expect("prompts");
        let vocab = Vocab::for_roster(&roster.identities, prompts.texts()).expect("vocab");
        let state = ModelState::init(Geometry::default(), vocab, seed).expect("model");
        let cfg = DataConfig {
            forget_singles: 8,
            forget_groups: 8,
            retain_singles: 2,
            retain_groups: 8,
            ..Default::default()
        };
        let data = unlearn_data(&roster, &state.vocab, &prompts, &cfg, 0, seed).expect("data");
        let task = UnlearnTask::new(&state, &roster, data, &AnchorConfig::default()).expect("task");
        Self { state, task }
    }

    pub fn batch(&self, n: usize) -> Vec<&Example> {
        self.task.forget.iter().cycle().take(n).collect()
    }
}
