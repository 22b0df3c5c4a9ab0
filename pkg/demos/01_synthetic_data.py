"""Walk through the synthetic generator.

Builds a small dataset, prints one job description with the skills behind
its items, the paired user's profile next to the JD's latent skill mix, and
how click rates rise with profile/JD similarity.

    python3 demos/01_synthetic_data.py
"""

import numpy as np

from skillrec.core import validate
from skillrec.synth import SynthConfig, generate

data = generate(SynthConfig(num_skills=8, num_titles=4, num_jds=400, num_users=400, seed=7))
ds, truth = data.dataset, data.truth
print(f"{len(ds.jds)} JDs, {len(ds.records)} paired users, {len(ds.clicks)} click records, vocabulary {len(ds.vocab)}")
print("validation:", "clean" if validate(ds).ok else validate(ds).violations[:3])

rec = ds.records[0]
jd = rec.jd
print(f"\nJD {jd.jd_id} (title {jd.title_id}, dominant skills {truth.title_skills[jd.title_id]}):")
for raw, skill in zip(jd.raw_items, truth.item_skills[jd.jd_id]):
    print(f"  [skill {skill}] {raw}")

np.set_printoptions(precision=3, suppress=True)
print("\nlatent skill mix of the JD:", truth.latents[jd.jd_id])
print("paired user profile:       ", rec.profile.skills.array)
print("aux info:", rec.profile.aux_info)

cos = np.asarray(truth.click_cosines)
labels = np.array([c.label for c in ds.clicks])
print("\nclick rate by cosine quartile:")
edges = np.quantile(cos, [0, 0.25, 0.5, 0.75, 1.0])
for lo, hi in zip(edges[:-1], edges[1:]):
    sel = (cos >= lo) & (cos <= hi)
    print(f"  cos in [{lo:.2f}, {hi:.2f}]: {labels[sel].mean():.2f}")
