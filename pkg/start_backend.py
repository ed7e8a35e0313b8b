#!/usr/bin/env python3
"""
Start only the ArtiField backend server
"""


def main():
    """Start the backend server only"""
    from backend.config import get_settings

    settings = get_settings()
    print("🚀 Starting ArtiField Backend...")
    print(f"Backend will run on: http://localhost:{settings.api_port}")
    print(f"API docs will be available at: http://localhost:{settings.api_port}/docs")
    print(f"Data directory: {settings.data_dir}")
    print("Press Ctrl+C to stop")
    print("=" * 50)

    try:
        # Import and run the main application
        from main import create_app
        import uvicorn

        app = create_app()
        uvicorn.run(
            app,
            host=settings.api_host,
            port=settings.api_port,
            reload=False,
            log_level=settings.log_level
        )
    except KeyboardInterrupt:
        print("\n🛑 Backend server stopped")
    except Exception as e:
        print(f"❌ Backend server error: {e}")
        print("\n💡 Troubleshooting:")
        print("1. Make sure all dependencies are installed: pip install -r requirements.txt")
        print("2. Check ARTIFIELD_DATA_DIR in your .env points to a writable directory")
        print("3. Try running: python install_deps.py")


if __name__ == "__main__":
    main()
