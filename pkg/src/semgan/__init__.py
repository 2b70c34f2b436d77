"""Detector-guided unpaired image translation for label-scarce detection.

Core surface: procedural scene generation (scenegen), networks and
checkpoints (nets), training objectives (losses), the four-stage pipeline
(pipeline), AP and consistency metrics (evaluation), configuration
(config), and the `semgan` CLI (cli).
"""

__version__ = "0.1.0"
