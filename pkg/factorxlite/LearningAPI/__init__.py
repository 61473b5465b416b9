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


from .p008_continual.p008_00_continual_experiment import ContinualExperiment

__all__ = [
    'ContinualExperiment'
]
