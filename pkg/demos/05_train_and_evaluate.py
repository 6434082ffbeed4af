# # Training and evaluation at desk scale
#
# A supervised warm start stands in for a pretrained backbone, then 200
# reinforcement steps run and the policy is evaluated with pass@k. This is
# the default desk configuration and takes about a minute on one core.

import numpy as np

from latentrl.config import RunConfig, TaskSpec
from latentrl.evaluation import difficulty_shift, evaluate
from latentrl.tasks import single_task_mixture
from latentrl.trainer import Trainer, moving_average

run = RunConfig(tasks=TaskSpec(single_task_mixture("add_chain", 2), eval_size=32))
tcfg = run.trainer
trainer = Trainer.fresh(run.model, run.sampler, tcfg, run.train_dataset())
print(f"warm start loss {trainer.pretrain_losses[0]:.3f} -> {trainer.pretrain_losses[-1]:.3f}")

eval_set = run.eval_dataset()
kw = dict(n_latent=tcfg.n_latent, max_answer_len=tcfg.max_answer_len)
before = evaluate(trainer.params, eval_set, 8, **kw)

for rec in trainer.run():
    if rec.step % 25 == 0:
        print(f"step {rec.step:3d}  reward {rec.reward_mean:.3f}  kl {rec.kl:.2e}  entropy {rec.entropy_mean:.2f}")
print("reward moving average", np.round(moving_average([r.reward_mean for r in trainer.history], 20)[19::30], 3))

after = evaluate(trainer.params, eval_set, 8, **kw)
print(f"pass@1 {before.pass_at_1:.3f} -> {after.pass_at_1:.3f}   pass@8 {before.pass_at_k:.3f} -> {after.pass_at_k:.3f}")

# Problems move between accuracy bins as training progresses.

for row in difficulty_shift(before, after).rows():
    print(row)
