"""
app/main.py
bst 실행 진입점 - 명령 실행과 종료 코드 매핑
"""

import sys
from typing import List, Optional

import click
from pydantic import ValidationError
from rich.console import Console

from app.cli import cli
from app.core.exceptions import ConfigError, OverwriteRefusedError
from app.core.logging import log_error_with_context

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2

error_console = Console(stderr=True)


def _validation_message(error: ValidationError) -> str:
    lines = []
    for item in error.errors():
        location = ".".join(str(part) for part in item.get("loc", ())) or "<root>"
        lines.append(f"  {location}: {item.get('msg')}")
    return "설정 검증 실패\n" + "\n".join(lines)


def run(argv: Optional[List[str]] = None) -> int:
    """명령 실행 후 종료 코드 반환

    0 성공, 1 설정/검증 오류 또는 덮어쓰기 거부, 2 실행/검증 실패
    """
    args = list(sys.argv[1:] if argv is None else argv)
    command = args[0] if args else "<none>"
    try:
        cli(args=args, prog_name="bst", standalone_mode=False)
        return EXIT_OK
    except click.exceptions.Exit as e:
        return e.exit_code
    except click.exceptions.Abort:
        error_console.print("[yellow]중단되었습니다[/yellow]")
        return EXIT_RUNTIME
    except click.ClickException as e:
        e.show()
        return EXIT_CONFIG
    except ValidationError as e:
        error_console.print(f"[red]{_validation_message(e)}[/red]", highlight=False)
        return EXIT_CONFIG
    except (ConfigError, OverwriteRefusedError) as e:
        log_error_with_context(e, {"command": command})
        error_console.print(f"[red]{e}[/red]", highlight=False)
        return EXIT_CONFIG
    except Exception as e:
        log_error_with_context(e, {"command": command})
        error_console.print(f"[red]{type(e).__name__}: {e}[/red]", highlight=False)
        return EXIT_RUNTIME


def main() -> None:
    """콘솔 스크립트 진입점"""
    sys.exit(run())


if __name__ == "__main__":
    main()
