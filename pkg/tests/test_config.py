import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from himemformer.config import (
    Config,
    ConfigError,
    desk_config,
    override,
    parse_config,
    serialize_config,
    toy_config,
)


def test_empty_text_gives_defaults():
    cfg = parse_config("")
    assert cfg == Config()
    assert (cfg.long_span, cfg.short_span, cfg.sample_rate, cfg.heads) == (64.0, 5.0, 4, 4)
    assert (cfg.batch_size, cfg.epochs, cfg.lr, cfg.weight_decay, cfg.warmup_epochs) == (16, 25, 7e-5, 1e-4, 10)
    assert cfg.stream.long_tokens == 64 and cfg.stream.anticipation_steps == 8


def test_comments_and_aliases():
    cfg = parse_config("# run\nm_L = 32  # seconds\nSR=8\nK = 5\nuse_context = false\n")
    assert cfg.long_span == 32.0 and cfg.sample_rate == 8 and cfg.num_classes == 5
    assert cfg.use_context is False


def test_short_longer_than_long_is_rejected():
    with pytest.raises(ConfigError) as exc:
        parse_config("m_L = 5\nm_S = 10\n")
    assert exc.value.line == 2
    assert "m_S" in str(exc.value)


def test_unknown_key_names_line():
    with pytest.raises(ConfigError) as exc:
        parse_config("D = 8\nH = 2\nbogus = 1\n")
    assert exc.value.line == 3 and exc.value.key == "bogus"
    assert "line 3" in str(exc.value)


@pytest.mark.parametrize("text", ["D = eight", "use_context = maybe", "no equals sign",
                                  "D = 10\nH = 4", "dropout = 0.1", "n1 = 100"])
def test_bad_values(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_round_trip_defaults_and_presets():
    for cfg in (Config(), desk_config(), toy_config(), toy_config(scenario="2x2", use_context=False)):
        assert parse_config(serialize_config(cfg)) == cfg


@given(st.sampled_from([1, 2, 4, 8]), st.floats(1, 64), st.sampled_from(["1x1", "2x2"]),
       st.booleans(), st.floats(1e-6, 1e-2))
@settings(max_examples=50, deadline=None)
def test_round_trip_property(sr, ms, scenario, ctx, lr):
    cfg = Config(sample_rate=sr, short_span=ms, scenario=scenario, use_context=ctx, lr=lr)
    assert parse_config(serialize_config(cfg)) == cfg


def test_override():
    cfg = override(Config(), ["epochs=3", "rho = 0.5"])
    assert cfg.epochs == 3 and cfg.coupling == 0.5


def test_derived_configs():
    cfg = toy_config()
    m = cfg.model
    assert (m.dim, m.long_tokens, m.short_tokens, m.anticipation_steps, m.num_classes) == (8, 8, 4, 2, 3)
    spec = cfg.replace(num_classes=4).scenario_spec("1x2", seed=9)
    assert spec.agents == 1 and spec.tasks == 2 and spec.seed == 9 and spec.feature_dim == 8
