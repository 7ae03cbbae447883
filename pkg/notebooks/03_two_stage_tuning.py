"""
Instruction tuning, then a review task
======================================

Stage one fits a LoRA adapter on code instructions. Stage two starts from
that file and tunes on review-comment generation. Step counts are kept
tiny so the script finishes in under a minute.
"""

# %%
import tempfile
from pathlib import Path

from peftreview import model as mdl
from peftreview import peft
from peftreview import pipeline as pl
from peftreview import tasks
from peftreview.tokenizer import Tokenizer

config = mdl.ModelConfig()
base = mdl.init_weights(config, seed=0)
tokenizer = Tokenizer.train(tasks.bundled_corpus(), config.vocab_size)

# %%
stage1 = peft.init_adapter("lora", config, seed=0, rank=8, alpha=16)
cfg = pl.TrainConfig(epochs=10, batch_size=8, max_tokens=256, learning_rate=0.01, max_steps=20, seed=0)
res = pl.train_stage(base, stage1, pl.instruction_dataset_load(), cfg, tokenizer)
print("stage one loss:", round(res.losses[0], 3), "->", round(res.losses[-1], 3))

# %%
out = Path(tempfile.mkdtemp())
peft.save_adapter(stage1, out / "stage1.bin")
stage2 = peft.load_adapter(out / "stage1.bin", config)
data = tasks.load_task_dataset(task="rcg")
cfg2 = pl.TrainConfig(stage="task", epochs=5, batch_size=8, max_tokens=256, learning_rate=0.005, max_steps=10)
res2 = pl.train_stage(base, stage2, [tasks.to_instruction(e) for e in data], cfg2, tokenizer)
print("stage two loss:", round(res2.losses[0], 3), "->", round(res2.losses[-1], 3))

# %%
report = tasks.evaluate(base, stage2, data[:8], "rcg", tokenizer, max_new_tokens=16)
print(report.summary())
