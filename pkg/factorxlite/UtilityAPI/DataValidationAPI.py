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


import ast
import json

from ..LearningAPI.p000_utility import ConfigError


class FactorXDataTypesManager:
    """
    Validate and convert configuration values against named data types.

    *Note*: 'int' rejects floats; use 'number' where either is
    acceptable (JSON writes 8.0 as 8).
    Booleans never validate as numbers.
    """
    def __init__(self):
        self.type_checkers = {
            'str': self.is_str,
            'int': self.is_int,
            'number': self.is_number,
            'bool': self.is_bool,
            'list': self.is_list,
            'list(int)': self.is_list_int,
            'list(str)': self.is_list_str,
            'dict': self.is_dict,
        }

    def register_custom_structure(self, type_name, structure_def):
        """
        Register a custom structured type validator.

        Parameters:
        -----------
        type_name : str
            A unique name for this structured type
        structure_def : dict
            Mapping of keys to their expected types

        Returns:
        --------
        str
            The registered type name
        """
        if not isinstance(structure_def, dict):
            raise ConfigError(f"Invalid structure definition. Must be a dict, got {type(structure_def)}")
        self.type_checkers[type_name] = lambda x: self.is_structured_dict(x, structure_def)
        return type_name

    def load_data_type(self, ditem, dtype, load_only=True):
        """
        Validate and convert data to the specified type.

        Types written 'optional(T)' also accept None.

        Raises:
        -------
        ConfigError
            If the type is unknown or the data does not validate
        """
        if dtype.startswith("optional(") and dtype.endswith(")"):
            if ditem is None:
                return None if load_only else (True, None, dtype)
            dtype = dtype[len("optional("):-1]

        checker = self.type_checkers.get(dtype)
        if not checker:
            raise ConfigError(f"Unsupported data type: {dtype}")
        result = checker(ditem)
        if result[0]:
            return result[1] if load_only else result
        raise ConfigError(f"Failed to load data:\ndatatype= {dtype}\ndata= {ditem!r}")

    def validate_section(self, values: dict, schema: dict, path: str = "") -> dict:
        """
        Check every key of a nested dictionary against a schema of type names.

        Returns:
        --------
        dict
            Converted values

        Raises:
        -------
        ConfigError
            Naming the first offending key
        """
        out = {}
        for key, value in values.items():
            key_path = f"{path}.{key}" if path else key
            if key.startswith("_"):
                continue
            if key not in schema:
                raise ConfigError(f"Unknown configuration key '{key_path}'")
            expected = schema[key]
            if isinstance(expected, dict):
                if not isinstance(value, dict):
                    raise ConfigError(f"Configuration key '{key_path}' must be an object")
                out[key] = self.validate_section(value, expected, key_path)
                continue
            try:
                out[key] = self.load_data_type(value, expected)
            except ConfigError as error:
                raise ConfigError(f"Invalid value for '{key_path}' (expected {expected}): {value!r}") from error
        return out

    def is_str(self, ditem):
        return isinstance(ditem, str), ditem, 'str'

    def is_int(self, ditem):
        if isinstance(ditem, (bool, float)):
            return False, None, None
        try:
            return True, int(ditem), 'int'
        except (TypeError, ValueError):
            return False, None, None

    def is_number(self, ditem):
        if isinstance(ditem, bool):
            return False, None, None
        if isinstance(ditem, (int, float)):
            return True, float(ditem), 'number'
        try:
            return True, float(ditem), 'number'
        except (TypeError, ValueError):
            return False, None, None

    def is_bool(self, ditem):
        if isinstance(ditem, bool):
            return True, ditem, 'bool'
        if isinstance(ditem, str) and ditem.lower() in ('true', 'false'):
            return True, ditem.lower() == 'true', 'bool'
        return False, None, None

    def _parse(self, ditem):
        if not isinstance(ditem, str):
            return ditem
        try:
            return json.loads(ditem)
        except json.JSONDecodeError:
            pass
        try:
            return ast.literal_eval(ditem)
        except (ValueError, SyntaxError):
            return None

    def is_list(self, ditem):
        data = self._parse(ditem)
        if isinstance(data, list):
            return True, data, 'list'
        return False, None, None

    def _check_list_type(self, ditem, type_name):
        ok, data, _ = self.is_list(ditem)
        if not ok:
            return False, None, None
        checker = self.type_checkers[type_name]
        converted = []
        for item in data:
            result = checker(item)
            if not result[0]:
                return False, None, None
            converted.append(result[1])
        return True, converted, f'list({type_name})'

    def is_list_int(self, ditem):
        return self._check_list_type(ditem, 'int')

    def is_list_str(self, ditem):
        return self._check_list_type(ditem, 'str')

    def is_dict(self, ditem):
        data = self._parse(ditem)
        if isinstance(data, dict):
            return True, data, 'dict'
        return False, None, None

    def is_structured_dict(self, ditem, expected_structure):
        """Every expected key present with a valid value; extra keys rejected."""
        ok, data, _ = self.is_dict(ditem)
        if not ok or set(data) != set(expected_structure):
            return False, None, None
        converted = {}
        for key, expected in expected_structure.items():
            try:
                converted[key] = self.load_data_type(data[key], expected)
            except ConfigError:
                return False, None, None
        return True, converted, 'structured_dict'
