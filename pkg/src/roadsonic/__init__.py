"""Vehicle speed and length from angled roadside ultrasonic sensors.

Pipeline: ``geometry`` synthesizes raw bursts, ``filtering`` cleans and
smooths them, ``detection`` finds the front/side/back events,
``estimation`` turns events into speed and length, ``fusion`` combines
modules on a device and ``experiments`` runs seeded batches.
"""
from .detection import CusumConfig, CusumDetector, EventKind, PassEvents, TrendEvent, detect_passes
from .errors import PipelineError
from .estimation import Characterisation, LengthEstimate, SpeedEstimate, characterise_pass
from .experiments import CellStats, ScenarioSpec, run_scenario, sweep_angles
from .filtering import FilterConfig, FilterPipeline, filter_stream
from .fusion import ChannelModel, DeviceTopology, fuse_length, fuse_pass, fuse_speed, simulate
from .geometry import NO_ECHO, NoiseModel, SensorConfig, VehiclePass, synthesize_pass
from .presets import PRESETS

__version__ = "0.1.0"
