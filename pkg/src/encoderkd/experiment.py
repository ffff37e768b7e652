"""Experiment orchestration: teacher, cell x seed runs, records and manifest.

Output directory layout::

    teacher.npz            fine-tuned (or MLM-trained) teacher, reused on rerun
    records/<run_id>.json  one record per completed run
    checkpoints/<run_id>.npz
    manifest.json          completed run ids plus the config fingerprint

Records hold no wall-clock values, so identical configs and seeds give
byte-identical record files. Every file is written to a temporary name and
then renamed into place, which makes an interrupted experiment resumable.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from .config import ExperimentConfig, InitConfig, ObjectiveConfig, init_label
from .data import Dataset, Vocab, encode_examples, load_task_files, synth_task
from .errors import ConfigInvalid, DistillError, RuntimeFailure
from .evaluation import MetricKind, RunRecord, is_degenerate, metric
from .initmap import Mode, Strategy, build_layer_map, initialize_student, supervision_pairs
from .model import EncoderModel, ModelConfig, load_checkpoint, save_checkpoint
from .objectives import INTERMEDIATE_TERMS
from .trainer import (
    TaskData,
    TrainingRecipe,
    predict,
    run_finetune,
    run_mlm_pretraining,
    run_task_agnostic,
    run_task_specific,
)

log = logging.getLogger(__name__)

RECORD_VERSION = 1


# -- data -------------------------------------------------------------------


@dataclass
class Prepared:
    dataset: Dataset
    vocab: Vocab
    data: TaskData
    max_len: int


def prepare_data(config: ExperimentConfig) -> Prepared:
    d = config.data
    if d.task == "TSV":
        ds = load_task_files(d.train, d.dev, d.schema)
    else:
        ds = synth_task(d.task, d.n, d.vocab_size, d.seed, d.synth)
    vocab = Vocab.build(ds.texts(), d.min_count)
    max_len = d.max_seq_len
    if max_len is None:
        if d.task == "TSV":
            longest = max(len(vocab.encode_pair(e.text_a, e.text_b, 10**9)) for e in ds.train + ds.dev)
            max_len = longest
        else:
            # [CLS] a [SEP] (b [SEP])
            max_len = 2 * d.synth.max_len + 3 if d.is_pair else d.synth.max_len + 2
    return Prepared(ds, vocab, TaskData.from_dataset(ds, vocab, max_len, d.metric), max_len)


def model_config(config: ExperimentConfig, prepared: Prepared, student: bool) -> ModelConfig:
    arch = config.student if student else config.teacher.arch
    return ModelConfig(
        num_layers=arch.num_layers,
        hidden_dim=arch.hidden_dim,
        num_heads=arch.num_heads,
        ffn_dim=arch.ffn_dim,
        vocab_size=len(prepared.vocab),
        max_seq_len=prepared.max_len,
        num_labels=len(prepared.dataset.label_space),
        init_std=arch.init_std,
    )


def mlm_corpus(prepared: Prepared):
    return [row for row in prepared.data.train.ids if len(row) > 1]


# -- teacher ----------------------------------------------------------------


def build_teacher(config: ExperimentConfig, prepared: Prepared) -> EncoderModel:
    """Train the teacher: task fine-tuning, or MLM training for task-agnostic runs."""
    t = config.teacher
    teacher = EncoderModel(model_config(config, prepared, student=False), seed=t.seed)
    recipe = TrainingRecipe(mode=Mode.FINETUNE, epochs=t.epochs, batch_size=t.batch_size, peak_lr=t.lr, seed=t.seed)
    if config.mode is Mode.TASK_AGNOSTIC:
        run_mlm_pretraining(teacher, mlm_corpus(prepared), recipe)
    else:
        run_finetune(teacher, prepared.data, recipe, name="teacher")
    return teacher


def obtain_teacher(config: ExperimentConfig, prepared: Prepared, out: Path) -> EncoderModel | None:
    if not config.needs_teacher:
        return None
    if config.teacher.checkpoint:
        teacher = load_checkpoint(config.teacher.checkpoint)
    else:
        path = out / "teacher.npz"
        if path.exists():
            teacher = load_checkpoint(path)
        else:
            teacher = build_teacher(config, prepared)
            atomic_write_bytes(path, _checkpoint_bytes(teacher))
    expected = model_config(config, prepared, student=False)
    if teacher.config.vocab_size != expected.vocab_size or teacher.config.max_seq_len < prepared.max_len:
        raise ConfigInvalid("teacher checkpoint does not match the configured data (vocab or length)")
    return teacher


# -- runs -------------------------------------------------------------------


@dataclass(frozen=True)
class RunSpec:
    objective: ObjectiveConfig
    init: InitConfig
    seed: int
    objective_label: str
    init_label: str
    task: str

    @property
    def run_id(self) -> str:
        raw = f"{self.task}__{self.objective_label}__{self.init_label}__seed{self.seed}"
        return re.sub(r"[^A-Za-z0-9_.+-]", "_", raw)


def plan_runs(config: ExperimentConfig) -> list[RunSpec]:
    runs = []
    for obj, init in config.cell_list():
        for seed in config.recipe.seeds:
            runs.append(RunSpec(obj, init, seed, obj.label, init_label(config, init), config.data.task_name))
    return runs


def _recipe(config: ExperimentConfig, seed: int, **kw) -> TrainingRecipe:
    r = config.recipe
    base = dict(
        mode=config.mode,
        stage1_epochs=r.stage1_epochs,
        stage2_epochs=r.stage2_epochs,
        epochs=r.epochs,
        max_steps=r.max_steps,
        batch_size=r.batch_size,
        peak_lr=r.lr,
        warmup_fraction=r.warmup_fraction,
        weight_decay=r.weight_decay,
        grad_clip=r.grad_clip,
        seed=seed,
        mask_rate=r.mask_rate,
        min_teacher_accuracy=config.teacher.min_accuracy,
    )
    base.update(kw)
    return TrainingRecipe(**base)


def execute_run(config: ExperimentConfig, prepared: Prepared, teacher: EncoderModel | None, run: RunSpec):
    """Train and evaluate one student; returns (record dict, student)."""
    sL = config.student.num_layers
    tL = config.teacher.arch.num_layers
    student = EncoderModel(model_config(config, prepared, student=True), seed=run.seed)
    layer_map = build_layer_map(run.init.strategy, tL, sL, run.init.layers, run.init.copy_embeddings)
    init_seed = 1000 + run.seed
    if layer_map.strategy is Strategy.RANDOM_INIT and not layer_map.copy_embeddings:
        student.reset_parameters(init_seed)
    else:
        initialize_student(student, teacher, layer_map, init_seed)

    stages: dict[str, dict[str, list[float]]] = {}
    obj = run.objective
    if config.mode is Mode.TASK_SPECIFIC:
        if obj.distills:
            pairs = supervision_pairs(layer_map, Mode.TASK_SPECIFIC, tL, sL) if obj.terms & INTERMEDIATE_TERMS else ()
            recipe = _recipe(config, run.seed, objective=obj.spec(pairs))
            s1, s2 = run_task_specific(teacher, student, prepared.data, recipe)
            stages = {"stage1": s1.epoch_losses, "stage2": s2.epoch_losses}
        else:
            # no-KD baseline: the same epoch budget spent on supervised training
            total = config.recipe.stage1_epochs + config.recipe.stage2_epochs
            res = run_finetune(student, prepared.data, _recipe(config, run.seed, mode=Mode.FINETUNE, epochs=total))
            stages = {"finetune": res.epoch_losses}
    elif config.mode is Mode.TASK_AGNOSTIC:
        if obj.distills:
            recipe = _recipe(config, run.seed, objective=obj.spec())
            res = run_task_agnostic(teacher, student, mlm_corpus(prepared), recipe)
        else:
            res = run_mlm_pretraining(student, mlm_corpus(prepared), _recipe(config, run.seed, mode=Mode.FINETUNE))
        stages = {res.name: res.epoch_losses}
        ft = _finetune_recipe(config, run.seed)
        stages["finetune"] = run_finetune(student, prepared.data, ft).epoch_losses
    else:
        res = run_finetune(student, prepared.data, _recipe(config, run.seed))
        stages = {"finetune": res.epoch_losses}

    dev = prepared.data.dev
    predictions = predict(student, dev)
    value = metric(prepared.data.metric, predictions, dev.labels)
    record = {
        "version": RECORD_VERSION,
        "run_id": run.run_id,
        "task": run.task,
        "objective": run.objective_label,
        "init": run.init_label,
        "seed": run.seed,
        "metric": MetricKind(prepared.data.metric).value,
        "value": value,
        "degenerate": is_degenerate(prepared.data.metric, predictions, dev.labels),
        "mode": config.mode.value,
        "teacher_layers": list(layer_map.teacher_layers),
        "copy_embeddings": layer_map.copy_embeddings,
        "stage_losses": stages,
    }
    return record, student


def _finetune_recipe(config: ExperimentConfig, seed: int) -> TrainingRecipe:
    r = config.recipe
    return _recipe(config, seed, mode=Mode.FINETUNE, epochs=r.finetune_epochs, peak_lr=r.finetune_lr or r.lr)


def to_run_record(record: dict) -> RunRecord:
    """Report rows are in percentage points."""
    return RunRecord(
        record["objective"], record["init"], record["task"], int(record["seed"]),
        100.0 * float(record["value"]), record["metric"], bool(record.get("degenerate", False)),
    )  # fmt: skip


# -- files ------------------------------------------------------------------


def atomic_write_bytes(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_json(path: Path, obj) -> None:
    atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def _checkpoint_bytes(model: EncoderModel) -> bytes:
    with tempfile.TemporaryDirectory() as tmp:
        p = save_checkpoint(model, Path(tmp) / "m.npz")
        return p.read_bytes()


def config_fingerprint(config: ExperimentConfig) -> str:
    return hashlib.sha256(json.dumps(config.source, sort_keys=True, default=str).encode()).hexdigest()[:16]


def read_manifest(out: Path) -> dict:
    path = out / "manifest.json"
    if not path.exists():
        return {"completed": [], "failed": {}}
    return json.loads(path.read_text())


def read_records(directory) -> list[dict]:
    directory = Path(directory)
    rec_dir = directory / "records" if (directory / "records").is_dir() else directory
    return [json.loads(p.read_text()) for p in sorted(rec_dir.glob("*.json"))]


# -- driver -----------------------------------------------------------------

# worker state for process pools: each worker prepares data and loads the
# teacher once, then serves many runs
_WORKER: dict = {}


def _worker_init(config: ExperimentConfig, teacher_path: str | None):
    prepared = prepare_data(config)
    teacher = load_checkpoint(teacher_path) if teacher_path else None
    _WORKER.update(config=config, prepared=prepared, teacher=teacher)


def _worker_run(run: RunSpec):
    return _run_and_store(_WORKER["config"], _WORKER["prepared"], _WORKER["teacher"], run)


def _run_and_store(config, prepared, teacher, run: RunSpec):
    out = Path(config.output)
    try:
        record, student = execute_run(config, prepared, teacher, run)
    except DistillError as exc:
        return run.run_id, None, f"{exc.code}: {exc}"
    atomic_write_bytes(out / "checkpoints" / f"{run.run_id}.npz", _checkpoint_bytes(student))
    atomic_write_json(out / "records" / f"{run.run_id}.json", record)
    return run.run_id, record, None


def run_experiment(config: ExperimentConfig, jobs: int = 1, progress=None) -> list[dict]:
    """Execute every pending (cell, seed) run; completed runs are skipped.

    Raises RuntimeFailure after writing a partial manifest if any run fails.
    """
    out = Path(config.output)
    out.mkdir(parents=True, exist_ok=True)
    prepared = prepare_data(config)
    teacher = obtain_teacher(config, prepared, out)
    manifest = read_manifest(out)
    fingerprint = config_fingerprint(config)
    if manifest.get("config") not in (None, fingerprint):
        log.warning("output directory was produced by a different config; completed runs are still reused")
    done = set(manifest.get("completed", []))
    runs = plan_runs(config)
    pending = [r for r in runs if r.run_id not in done or not (out / "records" / f"{r.run_id}.json").exists()]
    failed: dict[str, str] = {}

    def note(run_id, record, error):
        if error is None:
            done.add(run_id)
            failed.pop(run_id, None)
        else:
            failed[run_id] = error
        write_manifest(out, fingerprint, runs, done, failed)
        if progress:
            progress(run_id, record, error)

    write_manifest(out, fingerprint, runs, done, failed)
    if jobs > 1 and len(pending) > 1:
        teacher_path = config.teacher.checkpoint or (str(out / "teacher.npz") if teacher is not None else None)
        with ProcessPoolExecutor(max_workers=jobs, initializer=_worker_init, initargs=(config, teacher_path)) as pool:
            for run_id, record, error in pool.map(_worker_run, pending):
                note(run_id, record, error)
    else:
        for run in pending:
            start = time.perf_counter()
            note(*_run_and_store(config, prepared, teacher, run))
            log.info("run %s finished in %.1fs", run.run_id, time.perf_counter() - start)
    if failed:
        first = next(iter(failed.items()))
        raise RuntimeFailure(f"{len(failed)} run(s) failed; first {first[0]}: {first[1]}")
    by_id = {r["run_id"]: r for r in read_records(out)}
    return [by_id[r.run_id] for r in runs if r.run_id in by_id]


def write_manifest(out: Path, fingerprint: str, runs: Iterable[RunSpec], done: set, failed: dict) -> None:
    order = [r.run_id for r in runs]
    atomic_write_json(
        out / "manifest.json",
        {
            "config": fingerprint,
            "planned": order,
            "completed": [r for r in order if r in done],
            "failed": dict(sorted(failed.items())),
        },
    )
