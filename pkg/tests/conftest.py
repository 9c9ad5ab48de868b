"""Shared fixtures: a trained multi-domain backbone bank (built once)."""

import pytest

from flatshot.bank import BackboneBank, Provenance, as_plain_backbone, finetune
from flatshot.data import EpisodeProtocol, SyntheticSpec, gen_synthetic_domains
from flatshot.model import init_model
from flatshot.training import TrainConfig, train


@pytest.fixture(scope="session")
def selection_fixture(tmp_path_factory):
    """Base backbone plus per-domain vanilla fine-tunes over 4 synthetic
    domains with independently drawn class layouts (shift 2.0).

    Returns (bank, domains, protocol, base); domains[0] is the
    base-training domain, the bank holds ft_domain1..3.
    """
    spec = SyntheticSpec(
        n_domains=4,
        classes_per_domain=6,
        samples_per_class=40,
        dim=16,
        delta=2.0,
        sigma=0.6,
        mean_scale=2.0,
        layout="independent",
    )
    domains = gen_synthetic_domains(spec, seed=100)
    base_cfg = TrainConfig(
        batch_size=32,
        base_lr=0.05,
        min_lr=0.001,
        total_iterations=1500,
        restart_period=750,
        momentum=0.9,
        weight_decay=1e-4,
        rho=0.05,
        objective="sam",
        seed=7,
    )
    model = init_model([16, 32, 16, domains[0].n_classes], "relu", seed=7)
    base, _ = train(model, domains[0], base_cfg)

    ft_cfg = TrainConfig(
        batch_size=32,
        base_lr=0.03,
        min_lr=0.001,
        total_iterations=800,
        restart_period=400,
        momentum=0.9,
        weight_decay=1e-4,
        rho=0.05,
        objective="sam",
        seed=8,
    )
    bank = BackboneBank(tmp_path_factory.mktemp("bank"))
    for i, dom in enumerate(domains[1:], start=1):
        tuned, _ = finetune(as_plain_backbone(base), dom, ft_cfg, mode="vanilla")
        bank.put(
            f"ft_domain{i}",
            tuned,
            Provenance(
                objective="sam",
                rho=0.05,
                source_dataset=dom.name,
                parent="base",
                finetune_mode="vanilla",
                train_config_hash=ft_cfg.digest(),
            ),
        )
    protocol = EpisodeProtocol(
        min_way=3, max_way=5, min_shot=2, max_shot=5, query_per_class=5, seed=55
    )
    return bank, domains, protocol, base
