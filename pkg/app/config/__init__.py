from app.config.settings import (
    AblationConfig,
    AdapterConfig,
    AdapterTrainConfig,
    BackendConfig,
    DataConfig,
    DecodeConfig,
    GraphConfig,
    LmConfig,
    PretrainConfig,
    RunConfig,
    SplitConfig,
    SynthConfig,
    apply_overrides,
    load_run_config,
)
