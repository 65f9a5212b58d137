import pytest

from sqlorch import sqlexec
from sqlorch.demo import _assets_dir


@pytest.fixture()
def trade_db(tmp_path):
    """Fresh trade fixture database seeded from the bundled script."""
    seed = tmp_path / "seed_trade.sql"
    seed.write_text(
        _assets_dir().joinpath("seed_trade.sql").read_text(encoding="utf-8"), encoding="utf-8"
    )
    db_path = tmp_path / "trade.db"
    sqlexec.apply_fixture(seed, db_path)
    return str(db_path)
