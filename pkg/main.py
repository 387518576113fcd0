"""
Social Scenario Generation - Main Entry Point
Generates socially-aware interactive driving scenarios from recorded or
synthetic traffic.

Features:
- Two-stage interaction proposals (rule table, random baseline or chat service)
- Social value orientation rewards with an extrinsic intent registry
- Evolutionary guidance of a diffusion sampler
- Interaction metrics, social preference sweeps and ablations

Version: 2.0.0
"""

import sys
import os

# Add the src directory to the Python path
current_dir = os.path.dirname(os.path.abspath(__file__))
src_dir = os.path.join(current_dir, 'src')
sys.path.insert(0, src_dir)

REQUIRED_MODULES = {
    "numpy": "numpy",
    "scipy": "scipy",
    "httpx": "httpx",
    "PIL": "Pillow",
}


def check_dependencies():
    """Check if all required dependencies are available"""
    missing_deps = []
    for module, package in REQUIRED_MODULES.items():
        try:
            __import__(module)
        except ImportError:
            missing_deps.append(package)

    if missing_deps:
        error_msg = f"Missing required dependencies: {', '.join(missing_deps)}\n\n"
        error_msg += "Please install them using:\n"
        error_msg += "pip install -r requirements.txt"
        print(f"ERROR: {error_msg}", file=sys.stderr)
        return False

    return True


def main():
    """Main application entry point"""
    if not check_dependencies():
        sys.exit(1)

    try:
        from cli import main as cli_main
    except ImportError as e:
        print(f"ERROR: Failed to import application modules: {e}\n"
              "Please ensure all source files are present in the 'src' directory.", file=sys.stderr)
        sys.exit(1)

    sys.exit(cli_main(sys.argv[1:]))


if __name__ == "__main__":
    main()
