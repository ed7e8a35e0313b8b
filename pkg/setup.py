#!/usr/bin/env python3
"""
Setup script for ArtiField
"""

import os
import shutil
import subprocess
import sys


def run_command(command, description):
    """Run a command and handle errors"""
    print(f"🔄 {description}...")
    try:
        subprocess.run(command, shell=True, check=True, capture_output=True, text=True)
        print(f"✅ {description} completed successfully")
        return True
    except subprocess.CalledProcessError as e:
        print(f"❌ {description} failed: {e.stderr}")
        return False


def check_python_version():
    """Check if Python version is compatible"""
    version = sys.version_info
    if version.major < 3 or (version.major == 3 and version.minor < 9):
        print("❌ Python 3.9 or higher is required")
        return False
    print(f"✅ Python {version.major}.{version.minor}.{version.micro} is compatible")
    return True


def install_python_dependencies():
    """Install Python dependencies"""
    # Try the pinned requirements first
    if run_command(f"{sys.executable} -m pip install -r requirements.txt", "Installing Python dependencies"):
        return True

    # If that fails, try the flexible requirements
    print("⚠️  Pinned requirements failed, trying flexible requirements...")
    return run_command(f"{sys.executable} -m pip install -r requirements-flexible.txt",
                       "Installing Python dependencies (flexible)")


def check_native_packages():
    """Check the packages with compiled parts import cleanly"""
    ok = True
    for module in ("numpy", "scipy.spatial", "mcubes", "trimesh", "rtree"):
        try:
            __import__(module)
            print(f"✅ {module} is available")
        except ImportError as e:
            print(f"⚠️  {module} could not be imported: {e}")
            ok = False
    return ok


def create_env_file():
    """Create environment configuration file"""
    if os.path.exists(".env"):
        print("ℹ️  .env already exists, leaving it unchanged")
        return
    if os.path.exists(".env.example"):
        shutil.copyfile(".env.example", ".env")
    else:
        with open(".env", "w") as f:
            f.write("ARTIFIELD_DATA_DIR=~/.artifield\nARTIFIELD_LOG_LEVEL=info\n")
    print("✅ Created .env configuration file")


def main():
    """Main setup function"""
    print("🚀 Setting up ArtiField...")
    print("=" * 50)

    if not check_python_version():
        return False

    if not install_python_dependencies():
        return False

    if not check_native_packages():
        print("⚠️  Some packages failed to import; try: python install_deps.py")

    create_env_file()

    print("\n" + "=" * 50)
    print("🎉 Setup completed successfully!")
    print("\n📋 Next steps:")
    print("1. Generate data: python cli.py gen-synthetic --config configs/synthetic_small.json --out data/synth")
    print("2. Train a prior: python cli.py train-prior --config configs/synthetic_small.json "
          "--dataset data/synth --out runs/prior")
    print("3. Start the backend: python main.py")
    print("\n💡 Tips:")
    print("- Run the tests: python test_autodiff.py (or pytest)")
    print("- Check INSTALL.md for the full command reference")

    return True


if __name__ == "__main__":
    success = main()
    sys.exit(0 if success else 1)
