"""Real model-serving engine: generation, low-rank adapter NTP fine-tuning,
prompt-masked SFT, judge/embed forwarding.

The low-rank machinery is implemented directly on the module tree: selected
linear layers are wrapped with a shim that adds ``scaling * drop(x) A^T B^T``
when an adapter is active. Adapters are content-addressed by (base, data,
hyperparameters) so identical self-edits reuse one training run. SFT
checkpoints are stored on disk and swapped into the live model on demand;
all model access is serialized by one lock.
"""

from __future__ import annotations

import json
import logging
import threading
from pathlib import Path
from typing import Any, Sequence

import httpx

from selfedit.prompts import build_judge_prompt, parse_judge_verdict
from selfedit.errors import JudgeFormatError

from .config import ServiceConfig
from .engines import EngineError, NotFound, digest, trigram_embedding

logger = logging.getLogger(__name__)

# Preference order for adapter targets across common architectures.
_TARGET_PREFERENCES = (
    ("q_proj", "k_proj", "v_proj", "o_proj"),
    ("c_attn", "c_proj"),
)


def _make_shim_class(torch, nn):
    """Build the shim class lazily so importing this module never needs torch."""
    class LoraShim(nn.Module):
        def __init__(self, base: nn.Module, in_features: int, out_features: int):
            super().__init__()
            self.base = base
            self.in_features = in_features
            self.out_features = out_features
            self.slot: dict[str, Any] | None = None  # {"a","b","scaling","dropout"}

        def forward(self, x):
            out = self.base(x)
            slot = self.slot
            if slot is None:
                return out
            h = x
            if slot["dropout"] > 0.0 and self.training:
                h = nn.functional.dropout(h, p=slot["dropout"])
            delta = h @ slot["a"].transpose(0, 1) @ slot["b"].transpose(0, 1)
            return out + slot["scaling"] * delta

    return LoraShim


class HFEngine:
    def __init__(self, config: ServiceConfig, *, load_async: bool = True):
        if not config.model_path:
            raise ValueError("hf engine requires REFBACKEND_MODEL_PATH")
        self.config = config
        self._lock = threading.RLock()
        self._ready = False
        self._load_error: str | None = None
        self._adapters: dict[str, dict[str, Any]] = {}
        self._checkpoints: dict[str, Path] = {}
        self._loaded_checkpoint = "base"
        self._judge_fallback_warned = False
        if load_async:
            threading.Thread(target=self._load, daemon=True).start()
        else:
            self._load()

    # -- lifecycle ------------------------------------------------------------

    def _load(self) -> None:
        try:
            import torch
            from torch import nn
            from transformers import AutoModelForCausalLM, AutoTokenizer

            self.torch = torch
            self.nn = nn
            self._shim_class = _make_shim_class(torch, nn)
            self.tokenizer = AutoTokenizer.from_pretrained(self.config.model_path)
            if self.tokenizer.pad_token is None:
                self.tokenizer.pad_token = self.tokenizer.eos_token
            self.model = AutoModelForCausalLM.from_pretrained(self.config.model_path)
            self.model.to(self.config.device)
            self.model.eval()
            for param in self.model.parameters():
                param.requires_grad_(False)
            self._install_shims()
            self._base_state = {
                k: v.detach().clone() for k, v in self.model.state_dict().items()
            }
            self.config.work_dir.mkdir(parents=True, exist_ok=True)
            self._ready = True
            logger.info("model loaded from %s", self.config.model_path)
        except Exception as exc:  # surfaced as permanent 503
            self._load_error = f"{type(exc).__name__}: {exc}"
            logger.error("model load failed: %s", self._load_error)

    def ready(self) -> bool:
        return self._ready

    def _install_shims(self) -> None:
        nn = self.nn
        try:
            from transformers.pytorch_utils import Conv1D
        except ImportError:  # very old/new transformers layouts
            Conv1D = ()

        def features(module):
            if isinstance(module, nn.Linear):
                return module.in_features, module.out_features
            if Conv1D and isinstance(module, Conv1D):
                return module.weight.shape[0], module.weight.shape[1]
            return None

        linear_names = {
            name: features(module)
            for name, module in self.model.named_modules()
            if features(module) is not None
        }
        wanted = self.config.target_modules
        if not wanted:
            for preference in _TARGET_PREFERENCES:
                if any(name.rsplit(".", 1)[-1] in preference for name in linear_names):
                    wanted = preference
                    break
        if not wanted:
            raise RuntimeError("no adapter target modules found; set REFBACKEND_TARGET_MODULES")
        self._shims: dict[str, Any] = {}
        for name, feats in linear_names.items():
            if name.rsplit(".", 1)[-1] not in wanted:
                continue
            parent_name, _, attr = name.rpartition(".")
            parent = self.model.get_submodule(parent_name) if parent_name else self.model
            shim = self._shim_class(getattr(parent, attr), feats[0], feats[1])
            setattr(parent, attr, shim)
            self._shims[name] = shim
        if not self._shims:
            raise RuntimeError(f"target modules {wanted} matched nothing")
        logger.info("installed %d adapter shims (%s)", len(self._shims), ",".join(wanted))

    # -- helpers ----------------------------------------------------------------

    def _require_ready(self) -> None:
        if not self._ready:
            raise EngineError(self._load_error or "engine not ready")

    def _activate_checkpoint(self, model_id: str) -> None:
        if model_id == self._loaded_checkpoint:
            return
        if model_id == "base":
            self.model.load_state_dict(self._base_state)
        elif model_id in self._checkpoints:
            state = self.torch.load(self._checkpoints[model_id], map_location=self.config.device)
            self.model.load_state_dict(state)
        else:
            raise NotFound(f"unknown model {model_id}")
        self._loaded_checkpoint = model_id

    def _clear_slots(self) -> None:
        for shim in self._shims.values():
            shim.slot = None

    def _set_adapter(self, record: dict[str, Any]) -> None:
        scaling = record["hyperparameters"]["lora_alpha"] / record["hyperparameters"]["lora_rank"]
        for name, shim in self._shims.items():
            a, b = record["weights"][name]
            shim.slot = {
                "a": a,
                "b": b,
                "scaling": scaling,
                "dropout": record["hyperparameters"]["lora_dropout"],
            }

    # -- capabilities -----------------------------------------------------------

    def generate(self, model_id: str, prompt: str, decoding: dict[str, Any], seed: int) -> str:
        self._require_ready()
        torch = self.torch
        with self._lock:
            self._activate_checkpoint(model_id)
            self._clear_slots()
            return self._sample(prompt, decoding, seed)

    def _sample(self, prompt: str, decoding: dict[str, Any], seed: int, max_new: int | None = None) -> str:
        torch = self.torch
        encoded = self.tokenizer(prompt, return_tensors="pt", truncation=True).to(self.config.device)
        temperature = float(decoding.get("temperature", 1.0))
        requested = max_new if max_new is not None else int(decoding.get("max_tokens", 512))
        kwargs: dict[str, Any] = {
            "max_new_tokens": min(requested, self.config.max_new_tokens),
            "pad_token_id": self.tokenizer.pad_token_id,
        }
        if temperature > 0.0:
            kwargs.update(do_sample=True, temperature=temperature, top_p=float(decoding.get("top_p", 1.0)))
            top_k = int(decoding.get("top_k") or -1)
            kwargs["top_k"] = top_k if top_k > 0 else 0
            min_p = decoding.get("min_p")
            if min_p is not None:
                kwargs["min_p"] = float(min_p)
        else:
            kwargs.update(do_sample=False)
        if decoding.get("presence_penalty"):
            logger.warning("presence_penalty is not supported by this engine; ignored")
        torch.manual_seed(seed)
        with torch.no_grad():
            output = self.model.generate(**encoded, **kwargs)
        new_tokens = output[0][encoded["input_ids"].shape[1]:]
        return self.tokenizer.decode(new_tokens, skip_special_tokens=True)

    def train_adapter(self, base_model_id: str, sequences: Sequence[str], hyperparameters: dict[str, Any]) -> str:
        self._require_ready()
        adapter_id = "adapter-" + digest(
            base_model_id, json.dumps(list(sequences)), json.dumps(hyperparameters, sort_keys=True)
        )
        with self._lock:
            if adapter_id in self._adapters:
                return adapter_id  # identical self-edit: reuse the training run
            self._activate_checkpoint(base_model_id)
            weights = self._train_lora(sequences, hyperparameters)
            self._adapters[adapter_id] = {
                "base": base_model_id,
                "hyperparameters": dict(hyperparameters),
                "weights": weights,
            }
        return adapter_id

    def _train_lora(self, sequences: Sequence[str], hp: dict[str, Any]) -> dict[str, Any]:
        torch, nn = self.torch, self.nn
        rank = int(hp["lora_rank"])
        torch.manual_seed(0)
        weights = {}
        for name, shim in self._shims.items():
            a = torch.zeros(rank, shim.in_features, device=self.config.device)
            nn.init.normal_(a, std=1.0 / rank)
            b = torch.zeros(shim.out_features, rank, device=self.config.device)
            a.requires_grad_(True)
            b.requires_grad_(True)
            weights[name] = (a, b)
            shim.slot = {
                "a": a,
                "b": b,
                "scaling": hp["lora_alpha"] / rank,
                "dropout": float(hp["lora_dropout"]),
            }
        params = [t for pair in weights.values() for t in pair]
        optimizer = torch.optim.AdamW(params, lr=float(hp["learning_rate"]))
        accumulate = int(hp["gradient_accumulation_steps"])
        self.model.train()
        try:
            for _ in range(int(hp["num_epochs"])):
                pending = 0
                for sequence in sequences:
                    encoded = self.tokenizer(
                        sequence, return_tensors="pt", truncation=True
                    ).to(self.config.device)
                    outputs = self.model(**encoded, labels=encoded["input_ids"])
                    (outputs.loss / accumulate).backward()
                    pending += 1
                    if pending == accumulate:
                        optimizer.step()
                        optimizer.zero_grad()
                        pending = 0
                if pending:
                    optimizer.step()
                    optimizer.zero_grad()
        finally:
            self.model.eval()
            self._clear_slots()
        return {name: (a.detach(), b.detach()) for name, (a, b) in weights.items()}

    def answer(self, model_id: str, adapter_id: str | None, question: str) -> str:
        self._require_ready()
        with self._lock:
            self._activate_checkpoint(model_id)
            if adapter_id is not None:
                record = self._adapters.get(adapter_id)
                if record is None:
                    raise NotFound(f"unknown adapter {adapter_id}")
                if record["base"] != model_id:
                    raise EngineError(f"adapter {adapter_id} was trained from {record['base']}")
                self._set_adapter(record)
            else:
                self._clear_slots()
            try:
                prompt = f"Question: {question}\nAnswer:"
                text = self._sample(prompt, {"temperature": 0.0}, seed=0, max_new=64)
            finally:
                self._clear_slots()
        return text.strip().split("\n")[0].strip() or "unknown"

    def sft(self, base_model_id: str, examples: Sequence[dict[str, str]]) -> str:
        self._require_ready()
        torch = self.torch
        payload = json.dumps(list(examples), sort_keys=True)
        checkpoint_id = "ckpt-" + digest(base_model_id, payload)
        with self._lock:
            if checkpoint_id in self._checkpoints:
                return checkpoint_id
            self._activate_checkpoint(base_model_id)
            self._clear_slots()
            for param in self.model.parameters():
                param.requires_grad_(True)
            optimizer = torch.optim.AdamW(self.model.parameters(), lr=1e-5)
            self.model.train()
            try:
                for example in examples:
                    prompt_ids = self.tokenizer(example["prompt"], truncation=True)["input_ids"]
                    full = self.tokenizer(
                        example["prompt"] + example["target"], return_tensors="pt", truncation=True
                    ).to(self.config.device)
                    labels = full["input_ids"].clone()
                    labels[0, : min(len(prompt_ids), labels.shape[1])] = -100  # loss over targets only
                    loss = self.model(**full, labels=labels).loss
                    loss.backward()
                    optimizer.step()
                    optimizer.zero_grad()
            finally:
                self.model.eval()
                for param in self.model.parameters():
                    param.requires_grad_(False)
            path = self.config.work_dir / f"{checkpoint_id}.pt"
            torch.save(self.model.state_dict(), path)
            self._checkpoints[checkpoint_id] = path
            self._loaded_checkpoint = checkpoint_id
        return checkpoint_id

    def judge(self, question: str, gold: str, prediction: str) -> bool:
        self._require_ready()
        prompt = build_judge_prompt(question, gold, prediction or " ").text
        if self.config.judge_api_url:
            headers = {}
            if self.config.judge_api_key:
                headers["Authorization"] = f"Bearer {self.config.judge_api_key}"
            response = httpx.post(
                self.config.judge_api_url, json={"prompt": prompt}, headers=headers, timeout=60.0
            )
            response.raise_for_status()
            try:
                return parse_judge_verdict(response.json()["text"])
            except JudgeFormatError:
                logger.warning("judge returned a non-verdict; scoring as incorrect")
                return False
        if not self._judge_fallback_warned:
            logger.warning("no judge API configured; using substring matching")
            self._judge_fallback_warned = True
        return gold.lower() in prediction.lower()

    def embed(self, text: str) -> list[float]:
        self._require_ready()
        if self.config.embed_api_url:
            headers = {}
            if self.config.embed_api_key:
                headers["Authorization"] = f"Bearer {self.config.embed_api_key}"
            response = httpx.post(self.config.embed_api_url, json={"text": text}, headers=headers, timeout=60.0)
            response.raise_for_status()
            vector = [float(x) for x in response.json()["vector"]]
            norm = sum(x * x for x in vector) ** 0.5
            return [x / norm for x in vector]
        return trigram_embedding(text)

    def delete_adapter(self, adapter_id: str) -> bool:
        with self._lock:
            return self._adapters.pop(adapter_id, None) is not None
