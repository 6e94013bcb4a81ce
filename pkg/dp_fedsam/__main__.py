"""CLI入口模块"""

from .cli import main

if __name__ == "__main__":
    main()
