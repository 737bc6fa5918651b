"""Trainable-parameter counts at ViT-B/16 shape next to the published figures."""

from gendf.backbone import BackboneConfig
from gendf.peft import PeftPlan, count_trainable_params

VIT_B = BackboneConfig.vit_b16()

ROWS = [
    ("LoRA r=4 (Q,V)", PeftPlan(rank=4), False, False, "0.14M"),
    ("LoRA r=8 (Q,V)", PeftPlan(rank=8), False, False, "0.27M"),
    ("LoRA r=16 (Q,V)", PeftPlan(rank=16), False, False, "0.57M"),
    ("LoRA r=64 (Q,V)", PeftPlan(rank=64), False, False, "2.25M"),
    ("r=8 + FSR + head", PeftPlan(rank=8), True, True, "0.28M"),
    ("Adapter d'=64", 64, False, False, "2.27M"),
    ("FSR only", None, False, True, "1.5k"),
    ("head only", None, True, False, "1.5K"),
]


def main():
    print(f"{'setting':20s} {'count':>10s} {'/1e6':>7s} {'/2^20':>7s}  reported")
    for name, plan, head, fsr, reported in ROWS:
        n = count_trainable_params(plan, VIT_B, include_head=head, include_fsr=fsr)
        print(f"{name:20s} {n:10,d} {n / 1e6:7.3f} {n / 2**20:7.3f}  {reported}")


if __name__ == "__main__":
    main()
