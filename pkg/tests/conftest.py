import numpy as np
import pytest

from groundkit.core import (
    BoundingBox,
    CommonsenseType,
    ContextObject,
    Description,
    GroundingLabel,
    ImageRecord,
    PersonBox,
    PersonLink,
    Sample,
    Word,
)

D_VIS = 8


def make_person(index, x1, y1, x2, y2, rng=None, d_vis=D_VIS):
    rng = rng or np.random.default_rng(index)
    return PersonBox(index=index, box=BoundingBox(x1, y1, x2, y2),
                     feature=rng.normal(0, 1, d_vis).astype(np.float32))


def make_object(x1, y1, x2, y2, objectness=0.5, class_name="cup", seed=0, d_vis=D_VIS):
    rng = np.random.default_rng(seed)
    return ContextObject(box=BoundingBox(x1, y1, x2, y2),
                         feature=rng.normal(0, 1, d_vis).astype(np.float32),
                         objectness=objectness, class_name=class_name)


def make_sample(sample_id="s-0", n_persons=3, tokens=None, labels=None,
                ctype=CommonsenseType.OTHER, n_objects=1, width=800, height=200):
    rng = np.random.default_rng(hash(sample_id) % (2**32))
    persons = [make_person(i, 10 + 60 * i, 10, 60 + 60 * i, 120, rng=rng)
               for i in range(n_persons)]
    objects = [make_object(20 + 10 * (j % 70), 130 + 2 * (j // 70),
                           50 + 10 * (j % 70), 170 + 2 * (j // 70),
                           class_name="cup", seed=j) for j in range(n_objects)]
    if tokens is None:
        tokens = [PersonLink(1), Word("waves"), Word("happily")]
    if labels is None:
        labels = {1: 0}
    return Sample(sample_id=sample_id,
                  image=ImageRecord(image_id=f"img-{sample_id}", width=width,
                                    height=height, persons=persons,
                                    context_objects=objects),
                  description=Description(list(tokens)),
                  labels=GroundingLabel(dict(labels)),
                  commonsense_type=ctype)


@pytest.fixture
def simple_sample():
    return make_sample()
