"""Experiment configuration (JSON, units suffixed in field names)."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .clocks import ClockModel, preset
from .photon_sim import ChannelParams, DetectorParams, SourceParams, Symbol, SymbolSequence


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ClockConfig(_Block):
    """A preset plus optional per-field overrides."""

    preset: str = "ideal"
    fractional_offset: Optional[float] = None
    linear_drift_rate_per_s: Optional[float] = None
    white_fm_amp: Optional[float] = Field(None, ge=0)
    flicker_fm_amp: Optional[float] = Field(None, ge=0)
    random_walk_fm_amp: Optional[float] = Field(None, ge=0)
    seed: int = Field(0, ge=0, lt=2**64)

    def to_model(self) -> ClockModel:
        overrides = {"seed": self.seed}
        names = {"fractional_offset": "fractional_offset",
                 "linear_drift_rate_per_s": "linear_drift_rate",
                 "white_fm_amp": "white_fm_amp", "flicker_fm_amp": "flicker_fm_amp",
                 "random_walk_fm_amp": "random_walk_fm_amp"}
        for key, field_name in names.items():
            value = getattr(self, key)
            if value is not None:
                overrides[field_name] = value
        return preset(self.preset, **overrides)


class SourceConfig(_Block):
    clock_rate_hz: float = Field(5e8, gt=0)
    mean_photon_number: float = Field(5.4e-4, ge=0)
    source_jitter_ps: float = Field(37.0, ge=0)
    encoding_error: float = Field(0.0, ge=0, le=1)


class ChannelConfig(_Block):
    loss_db: float = Field(0.0, ge=0)
    background_rate_cps: float = Field(100.0, ge=0)
    propagation_delay_ps: float = 48967.0
    fiber_length_m: float = Field(10.0, ge=0)
    thermo_optic_per_k: float = 11e-6
    expansion_per_k: float = 0.55e-6
    refractive_index: float = Field(1.468, gt=0)
    wavelength_m: float = Field(1550e-9, gt=0)
    temperature_offset_k: float = 0.0
    temperature_amplitude_k: float = 0.0
    temperature_period_s: float = Field(600.0, gt=0)
    delay_steps: list[tuple[float, float]] = Field(
        default_factory=list, description="(time_s, delta_ps) step changes of the delay")


class DetectorConfig(_Block):
    detector_jitter_ps: float = Field(13.0, ge=0)
    adc_jitter_ps: float = Field(3.0, ge=0)
    dead_time_ps: float = Field(0.0, ge=0)
    resolution_ps: int = Field(1, ge=1)


class SequenceConfig(_Block):
    length: int = Field(1000, ge=1)
    seed: int = Field(1, ge=0)
    symbols: Optional[list[int]] = Field(
        None, description="explicit pattern: 0..3 or EARLY/LATE/PLUS/MINUS")
    time_basis_only: bool = False

    @field_validator("symbols", mode="before")
    @classmethod
    def _names(cls, v):
        if v is None:
            return v
        try:
            return [Symbol[x.upper()].value if isinstance(x, str) else x for x in v]
        except KeyError as exc:
            raise ValueError(f"unknown symbol name {exc.args[0]!r}") from None

    def build(self) -> SymbolSequence:
        if self.symbols is not None:
            return SymbolSequence(self.symbols)
        return SymbolSequence.random(self.length, self.seed, self.time_basis_only)


class SessionConfig(_Block):
    duration_s: float = Field(300.0, gt=0)
    acquisition_time_s: float = Field(0.1, gt=0)
    update_time_s: float = Field(0.15, gt=0)
    sweep_range: float = Field(20e-6, ge=0)
    sweep_step: float = Field(0.5e-9, gt=0)
    s_threshold: float = Field(5.0, ge=0)
    max_shift: Optional[int] = Field(None, ge=0)
    slip_trigger_qber: float = Field(0.4, ge=0, le=1)
    slip_accept_qber: float = Field(0.1, ge=0, le=1)
    slip_k_max: int = Field(3, ge=1)
    correlation_window_ps: float = Field(39.0, gt=0)
    control_run: bool = True
    reference_jitter_ps: Optional[float] = Field(
        None, ge=0, description="sigma_0 when no control run is made")
    chunk_duration_s: float = Field(0.05, gt=0)

    @model_validator(mode="after")
    def _check_times(self):
        if self.update_time_s < self.acquisition_time_s:
            raise ValueError("update_time_s must be >= acquisition_time_s")
        if self.duration_s < self.update_time_s:
            raise ValueError("duration_s must be >= update_time_s")
        return self


class OutputConfig(_Block):
    dir: str = "out"
    format: str = Field("csv", pattern="^(csv|json)$")


def _default_sender():
    return ClockConfig(preset="quartz-default", fractional_offset=4.1e-6, seed=11)


def _default_receiver():
    return ClockConfig(preset="quartz-default", fractional_offset=-3.5e-6,
                       linear_drift_rate_per_s=-1e-10, seed=12)


class ExperimentConfig(_Block):
    sender_clock: ClockConfig = Field(default_factory=_default_sender)
    receiver_clock: ClockConfig = Field(default_factory=_default_receiver)
    source: SourceConfig = Field(default_factory=SourceConfig)
    channel: ChannelConfig = Field(default_factory=ChannelConfig)
    detector: DetectorConfig = Field(default_factory=DetectorConfig)
    sequence: SequenceConfig = Field(default_factory=SequenceConfig)
    session: SessionConfig = Field(default_factory=SessionConfig)
    outputs: OutputConfig = Field(default_factory=OutputConfig)
    seed: int = Field(0, ge=0, lt=2**64)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.model_validate_json(Path(path).read_text())

    def dump(self, path) -> None:
        Path(path).write_text(self.model_dump_json(indent=2))

    def updated(self, **sections) -> "ExperimentConfig":
        """Copy with fields replaced; dict values merge into the named block.

        ``cfg.updated(session={"duration_s": 5}, seed=3)``. The result is
        validated like a freshly loaded file.
        """
        data = self.model_dump()
        for key, value in sections.items():
            if isinstance(value, dict) and isinstance(data.get(key), dict):
                data[key] = {**data[key], **value}
            else:
                data[key] = value
        return type(self).model_validate(data)

    def with_ideal_clocks(self) -> "ExperimentConfig":
        """Same experiment referenced to a perfect shared clock (control run)."""
        return self.model_copy(update={"sender_clock": ClockConfig(),
                                       "receiver_clock": ClockConfig()})

    def source_params(self) -> SourceParams:
        s = self.source
        return SourceParams(s.clock_rate_hz, s.mean_photon_number, s.source_jitter_ps,
                            self.sender_clock.to_model(), s.encoding_error)

    def channel_params(self) -> ChannelParams:
        c = self.channel
        return ChannelParams(
            loss_db=c.loss_db, background_rate=c.background_rate_cps,
            propagation_delay=c.propagation_delay_ps, fiber_length=c.fiber_length_m,
            thermo_optic=c.thermo_optic_per_k, expansion=c.expansion_per_k,
            refractive_index=c.refractive_index, wavelength=c.wavelength_m,
            temperature_offset=c.temperature_offset_k,
            temperature_amplitude=c.temperature_amplitude_k,
            temperature_period=c.temperature_period_s,
            delay_steps=tuple(tuple(s) for s in c.delay_steps))

    def detector_params(self) -> DetectorParams:
        d = self.detector
        return DetectorParams(d.detector_jitter_ps, d.adc_jitter_ps, d.dead_time_ps,
                              d.resolution_ps, self.receiver_clock.to_model())

    def jitter_components(self) -> list[float]:
        return [self.detector.adc_jitter_ps, self.source.source_jitter_ps,
                self.detector.detector_jitter_ps]


def config_schema() -> dict:
    return ExperimentConfig.model_json_schema()


def write_schema(path) -> None:
    Path(path).write_text(json.dumps(config_schema(), indent=2) + "\n")
