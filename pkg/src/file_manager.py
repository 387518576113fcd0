"""
File management module for scenario batches.
Handles scenario import from files and folders, output directory checks and
output naming.
"""

import logging
import os
from typing import Dict, List, Tuple

from errors import InputError
from scenario import Scenario, load_scenario

logger = logging.getLogger(__name__)


class FileManager:
    """Tracks the scenario files of a batch run"""

    SUPPORTED_EXTENSIONS = {'.json'}
    # Outputs of a run that live next to generated scenarios
    RESERVED_NAMES = {'run_config.resolved.json', 'proposal.json'}
    OUTPUT_SUFFIX = "_generated"

    def __init__(self):
        self.imported_files: List[str] = []

    def is_scenario_file(self, file_path: str) -> bool:
        name = os.path.basename(file_path)
        _, ext = os.path.splitext(name.lower())
        return ext in self.SUPPORTED_EXTENSIONS and name not in self.RESERVED_NAMES

    def import_single_file(self, file_path: str) -> bool:
        if not os.path.isfile(file_path) or not self.is_scenario_file(file_path):
            return False
        if file_path not in self.imported_files:
            self.imported_files.append(file_path)
            return True
        return False

    def import_folder(self, folder_path: str, recursive: bool = False) -> List[str]:
        """Import all scenario files from a folder, sorted by name"""
        imported = []
        if not os.path.isdir(folder_path):
            return imported
        if recursive:
            for root, dirs, files in os.walk(folder_path):
                dirs.sort()
                for file in sorted(files):
                    file_path = os.path.join(root, file)
                    if self.import_single_file(file_path):
                        imported.append(file_path)
        else:
            for file in sorted(os.listdir(folder_path)):
                file_path = os.path.join(folder_path, file)
                if self.import_single_file(file_path):
                    imported.append(file_path)
        return imported

    def load_all(self) -> Tuple[List[Tuple[str, Scenario]], Dict[str, str]]:
        """Parse every imported file; unparseable ones are skipped with a warning"""
        loaded, failures = [], {}
        for file_path in self.imported_files:
            try:
                loaded.append((file_path, load_scenario(file_path)))
            except InputError as e:
                logger.warning("Skipping %s: %s", file_path, e)
                failures[file_path] = str(e)
        return loaded, failures

    def validate_output_directory(self, output_dir: str, prevent_overwrite: bool = True) -> str:
        """Create the output directory if needed and check that results can go there.

        With prevent_overwrite, a directory holding any imported scenario is
        refused so generated files never land among their inputs.
        """
        if not output_dir:
            raise InputError("Output directory not specified")

        if not os.path.exists(output_dir):
            try:
                os.makedirs(output_dir, exist_ok=True)
            except OSError as e:
                raise InputError(f"Cannot create output directory {output_dir}: {e}")

        if not os.path.isdir(output_dir):
            raise InputError(f"Output path is not a directory: {output_dir}")
        if not os.access(output_dir, os.W_OK):
            raise InputError(f"No write permission for output directory: {output_dir}")

        if prevent_overwrite:
            target = os.path.abspath(output_dir)
            for file_path in self.imported_files:
                if os.path.dirname(os.path.abspath(file_path)) == target:
                    raise InputError(f"Output directory {output_dir} holds input {os.path.basename(file_path)}; "
                                     f"choose another --out")
        return output_dir

    def generate_output_filename(self, input_path: str, extension: str = ".json") -> str:
        base_name = os.path.splitext(os.path.basename(input_path))[0]
        return f"{base_name}{self.OUTPUT_SUFFIX}{extension}"

    def check_file_conflicts(self, output_dir: str) -> List[str]:
        """Generated files for the imported scenarios that already exist in output_dir"""
        conflicts = []
        for input_file in self.imported_files:
            output_path = os.path.join(output_dir, self.generate_output_filename(input_file))
            if os.path.exists(output_path):
                conflicts.append(output_path)
        return conflicts


def ensure_output_directory(output_dir: str) -> str:
    return FileManager().validate_output_directory(output_dir)
