#!/usr/bin/env python3
"""
Per-package dependency installer for ArtiField

Installs the service stack, then the numeric packages (retrying those without
a usable wheel unpinned), then checks that every compiled module imports.
"""

import importlib
import subprocess
import sys

# Service stack
CORE_PACKAGES = [
    "fastapi>=0.100.0",
    "uvicorn>=0.20.0",
    "pydantic>=2.0.0",
    "requests>=2.25.0",
    "python-multipart>=0.0.5",
    "aiofiles>=23.0.0",
    "python-dotenv>=1.0.0",
    "tqdm>=4.60.0",
    "Pillow>=9.0.0",
]

# Numeric packages, some with compiled extensions
NUMERIC_PACKAGES = [
    "numpy>=1.22.0",
    "scipy>=1.8.0",
    "PyMCubes>=0.1.2",
    "trimesh>=3.20.0",
    "rtree>=1.0.0",
]

# Distribution name -> module the code imports
IMPORT_NAMES = {
    "numpy": "numpy",
    "scipy": "scipy.spatial",
    "PyMCubes": "mcubes",
    "trimesh": "trimesh.proximity",
    "rtree": "rtree",
    "Pillow": "PIL.Image",
}


def install_package(package):
    """Install a single package; returns False instead of raising"""
    try:
        subprocess.run([sys.executable, "-m", "pip", "install", package], check=True)
        print(f"✅ Installed {package}")
        return True
    except subprocess.CalledProcessError as e:
        print(f"❌ Failed to install {package}: {e}")
        return False


def verify_imports():
    """Import each compiled module once; returns the names that failed"""
    failed = []
    for dist, module in IMPORT_NAMES.items():
        try:
            importlib.import_module(module)
            print(f"✅ {dist} imports as {module}")
        except ImportError as e:
            print(f"❌ {dist} ({module}) does not import: {e}")
            failed.append(dist)
    return failed


def main():
    print("🔄 Installing ArtiField dependencies...")

    print("\n📦 Installing service packages...")
    for package in CORE_PACKAGES:
        install_package(package)

    print("\n🧮 Installing numeric packages...")
    for package in NUMERIC_PACKAGES:
        if install_package(package):
            continue
        name = package.split(">=")[0]
        print(f"⚠️  Retrying {name} unpinned...")
        install_package(name)

    print("\n🔍 Checking compiled modules...")
    failed = verify_imports()
    if failed:
        print(f"\n⚠️  Not importable: {', '.join(failed)}")
        if "rtree" in failed:
            print("💡 rtree needs libspatialindex (e.g. apt install libspatialindex-dev)")
        return False

    print("\n✅ Dependency installation completed!")
    print("\n📋 Next steps:")
    print("1. Copy .env.example to .env and adjust ARTIFIELD_DATA_DIR")
    print("2. Run the tests: python test_autodiff.py")
    print("3. Generate a smoke dataset: python cli.py gen-synthetic --config configs/smoke.json --out data/smoke")
    return True


if __name__ == "__main__":
    sys.exit(0 if main() else 1)
