"""Walk a frontier explorer through a random world and watch the
semantic map fill in.

Writes world.png, map_final.png, and ego_final.png next to this script
and prints the sector summary the policy's map-understanding stage
trains against.
"""

import os

import numpy as np
from PIL import Image

from navlab import demogen, mapper
from navlab.gridsim import WorldConfig, generate_world

HERE = os.path.dirname(os.path.abspath(__file__))


def save(img, name):
    path = os.path.join(HERE, name)
    Image.fromarray(img).save(path)
    print(f"wrote {path}")


def main():
    world = generate_world(12, WorldConfig())
    ep = demogen.run_policy_episode(world, goal_category=2,
                                    kind=demogen.PolicyKind.FRONTIER, seed=4)
    print(f"episode: {len(ep.actions)} steps, outcome {ep.outcome.name}")
    print("actions:", "".join(a.name[0] for a in ep.actions))

    channels = np.zeros((world.num_categories + 2, world.height, world.width),
                        dtype=bool)
    channels[0] = ~world.occupancy
    channels[1] = world.occupancy
    for cat in range(1, world.num_categories + 1):
        channels[1 + cat] = world.semantic == cat
    truth = mapper.SemanticMap(channels, (world.width // 2, world.height // 2),
                               mapper.Frame.ALLOCENTRIC)
    save(mapper.render_map(truth), "world.png")

    final = ep.snapshot(len(ep.actions) - 1)
    save(mapper.render_map(final), "map_final.png")

    pose = ep.poses[-2]
    ego = mapper.egocentric_view(final, pose, window=33)
    save(mapper.render_map(ego, scale=12), "ego_final.png")

    explored = (final.channels[0] | final.channels[1]).mean()
    print(f"explored {explored:.0%} of the grid")
    desc = mapper.describe_map(final, pose, recent_actions=ep.actions[-3:])
    print(desc.text)


if __name__ == "__main__":
    main()
