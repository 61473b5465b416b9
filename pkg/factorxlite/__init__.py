######################################################################################################
# FactorXLite - A factorization-centralization toolkit for rehearsal-free continual learning
# Copyright (C) 2025 FactorXLite contributors
#
# This program is free software: you can redistribute it and/or modify
# it under the terms of the GNU General Public License as published by
# the Free Software Foundation, either version 3 of the License, or
# (at your option) any later version.
#
# This program is distributed in the hope that it will be useful,
# but WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE. See the
# GNU General Public License for more details.
#
# You should have received a copy of the GNU General Public License
# along with this program. If not, see <https://www.gnu.org/licenses/>.
######################################################################################################


from .LearningAPI.p008_continual import ContinualExperiment
from .UtilityAPI.RunConfigAPI import RunConfig, load_run_config
from . import UtilityAPI
from .config import INFO
__version__ = INFO["version"]

__all__ = [
    "__version__",
    "ContinualExperiment",
    "RunConfig",
    "load_run_config",
    "UtilityAPI"
]
