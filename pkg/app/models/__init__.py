from app.models.records import (
    DatasetRecord,
    ExplanationRecord,
    PairRequest,
    Profile,
    ScoreRow,
    TrainingLog,
    write_jsonl,
)
