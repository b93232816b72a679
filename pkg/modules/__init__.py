"""Restoration-agent training harness: environment, demonstrations, policy, rewards, pool, trainer."""
