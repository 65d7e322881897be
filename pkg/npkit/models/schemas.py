"""配置与命令模型（pydantic）"""

from pathlib import Path
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, field_validator, model_validator


class ModelConfig(BaseModel):
    """神经过程网络结构配置"""
    d_x: int = Field(2, ge=1, description="输入坐标维度")
    d_y: int = Field(1, ge=1, description="输出维度（灰度为 1）")
    d_h: int = Field(64, ge=1, description="隐藏层宽度")
    d_s: int = Field(64, ge=1, description="池化嵌入维度")
    d_z: int = Field(64, ge=1, description="任务嵌入 z 的维度")
    d_psi: int = Field(16, ge=1, description="SIVI 混合变量 ψ 的维度")
    d_eps: int = Field(16, ge=1, description="SIVI 噪声 ε 的维度")
    pooling: Literal["mean", "max"] = Field("max", description="置换不变池化方式")
    head: Literal["plain", "sivi"] = Field("plain", description="编码器头部")
    obs_variance: Literal["fixed", "learned"] = Field("learned", description="观测方差模式")
    sigma0: float = Field(0.2, gt=0.0, description="固定观测标准差")
    latent_sigma_head: Literal["narrow", "wide"] = Field(
        "narrow", description="潜变量标准差头部：narrow=0.9+0.1·sigmoid，wide=0.1+0.9·sigmoid"
    )

    class Config:
        extra = "forbid"
        frozen = True

    @classmethod
    def full_scale(cls, **overrides) -> "ModelConfig":
        """全尺寸结构（d_z = d_s = d_h = 512，d_ψ = d_ε = 32）"""
        values = dict(d_h=512, d_s=512, d_z=512, d_psi=32, d_eps=32)
        values.update(overrides)
        return cls(**values)


class TrainConfig(BaseModel):
    """训练配置"""
    objective: Literal["elbo", "np", "sivi"] = Field("np", description="训练目标")
    np_form: Literal["sampled", "analytic"] = Field("sampled", description="NP 目标的估计形式")
    batch_size: int = Field(16, ge=1)
    epochs: int = Field(10, ge=1)
    lr: float = Field(5e-4, gt=0.0, description="基础学习率")
    lr_schedule: bool = Field(False, description="是否启用分段衰减")
    lr_milestones: Tuple[int, ...] = Field((20, 50, 80), description="衰减的 epoch")
    lr_factor: float = Field(0.1, gt=0.0, le=1.0)
    seed: int = Field(0, ge=0)
    n_range: Tuple[int, int] = Field((1, 200), description="上下文大小 n 的半开区间")
    mprime_range: Tuple[int, int] = Field((0, 200), description="额外目标点数 m' 的半开区间")
    sivi_k: int = Field(16, ge=0, description="训练时 SIVI 界的 K")
    sivi_prior: Literal["prior", "context"] = Field("prior", description="SIVI 界中 p(z) 的来源")
    z_samples: int = Field(1, ge=1, description="每个任务每步的 z 采样数")
    adam_beta1: float = Field(0.9, ge=0.0, lt=1.0)
    adam_beta2: float = Field(0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(1e-8, gt=0.0)
    grad_clip: Optional[float] = Field(None, gt=0.0, description="梯度最大范数，None 表示不裁剪")
    checkpoint_every: int = Field(0, ge=0, description="每隔多少个 epoch 写检查点，0 表示只写最终检查点")
    eval_k: int = Field(1000, ge=1, description="评估时 IWAE 的 K")

    class Config:
        extra = "forbid"
        frozen = True

    @field_validator("n_range")
    @classmethod
    def _check_n_range(cls, v: Tuple[int, int]) -> Tuple[int, int]:
        lo, hi = v
        if lo < 1 or hi <= lo:
            raise ValueError(f"n_range 必须满足 1 <= lo < hi，当前为 {v}")
        return v

    @field_validator("mprime_range")
    @classmethod
    def _check_mprime_range(cls, v: Tuple[int, int]) -> Tuple[int, int]:
        lo, hi = v
        if lo < 0 or hi <= lo:
            raise ValueError(f"mprime_range 必须满足 0 <= lo < hi，当前为 {v}")
        return v

    @field_validator("lr_milestones")
    @classmethod
    def _check_milestones(cls, v: Tuple[int, ...]) -> Tuple[int, ...]:
        if any(m < 0 for m in v) or list(v) != sorted(v):
            raise ValueError(f"lr_milestones 必须为非负递增序列，当前为 {v}")
        return v

    @property
    def train_max_context(self) -> int:
        """训练中出现过的最大上下文大小"""
        return self.n_range[1] - 1


class Command(BaseModel):
    """一次命令行调用"""
    subcommand: Literal["train", "eval", "sample", "diagnose", "select", "score"]
    config: Optional[Path] = None
    overrides: List[str] = Field(default_factory=list)
    seed: int = Field(..., ge=0, description="随机种子（必填）")
    out: Path

    class Config:
        extra = "forbid"

    @model_validator(mode="after")
    def _check_overrides(self) -> "Command":
        for item in self.overrides:
            if "=" not in item:
                raise ValueError(f"--set 需要 key=value 形式: {item}")
        return self
