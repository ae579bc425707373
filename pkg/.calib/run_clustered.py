import math, time, json
import numpy as np
from meshpose import geometry as g, meshmodel as mm, synth, inference as inf, training as tr, adaptation as ad

t0=time.perf_counter()
d = 16
geo = g.make_cuboid_mesh((1.0, 0.8, 1.4), 5)
R = geo.n_vertices
order = np.lexsort((geo.vertices[:,0], geo.vertices[:,1], geo.vertices[:,2]))
robust_subset = tuple(sorted(int(i) for i in order[:30]))
ranges = g.PoseRanges(distance=5.0)
cam = g.Camera(focal=110.0, cx=31.5, cy=31.5, height=64, width=64)
ms = 7
r = np.random.default_rng(ms)
feats = r.standard_normal((R, d)); feats /= np.linalg.norm(feats, axis=1, keepdims=True)
z = r.standard_normal((5, d)); z /= np.linalg.norm(z, axis=1, keepdims=True)
tm = mm.NeuralMesh(geometry=geo, features=feats, kappas=np.full(R, 20.0))
tc = mm.ClutterModel(betas=z, kappa_prime=15.0)
src = synth.generate_source(tm, tc, cam, 96, 20.0, seed=ms+100, ranges=ranges)
model, _ = tr.train_source(src, geo, cam, d, tr.TrainingConfig(epochs=4, seed=0))
delta = ad.calibrate_thresholds(model, src, cam, quantile=0.95)
spec = synth.DomainSpec(robust_fraction=0.3, robust_subset=robust_subset, perturb_deg=(60.0,90.0), data_kappa=20.0)
mt, ct, _ = synth.shift_model(tm, tc, spec, np.random.default_rng(ms+11))
target, _ = synth.generate_target(mt, ct, spec, cam, 128, seed=21, ranges=ranges)
_, probe_sealed = synth.generate_target(mt, ct, spec, cam, 96, seed=77, ranges=ranges)
grid = inf.PoseGrid(12,3,3,ranges=ranges)
opts = inf.InferenceOpts(max_iters=80, k_init=3)
bank = inf.build_pose_bank(model.mesh, cam, grid)
m0, _, est0 = tr.evaluate(model, probe_sealed.labeled(), opts, bank=bank)
ratio0 = np.mean([tr.scene_robust_ratio(model, s.features, e, 0.8) for s, e in zip(probe_sealed.labeled(), est0) if e is not None])
print(f'[{time.perf_counter()-t0:.0f}s] UNADAPT pi/6={m0.acc_pi6:.3f} pi/18={m0.acc_pi18:.3f} ratio@0.8={ratio0:.4f}', flush=True)
model2 = tr.Model(model.mesh, model.clutter, model.extractor, thresholds=delta)
acfg = ad.AdaptationConfig(alpha=0.9, epochs=100, seed=5, lr=0.02, batch_size=32, infer=inf.InferenceOpts(max_iters=15))
ta=time.perf_counter()
adapted, hist = ad.adapt(model2, target, acfg, cam, bank=bank)
print(f'adapt: {time.perf_counter()-ta:.0f}s, epochs {len(hist.rows)}', flush=True)
for row in hist.rows[::25]: print({k: (round(v,3) if isinstance(v,float) else v) for k,v in row.items() if v is not None}, flush=True)
m1, _, est1 = tr.evaluate(adapted, probe_sealed.labeled(), opts, bank=bank)
ratio1 = np.mean([tr.scene_robust_ratio(adapted, s.features, e, 0.8) for s, e in zip(probe_sealed.labeled(), est1) if e is not None])
cos_t = np.sum(adapted.mesh.features * mt.features, axis=1)
print(f'ADAPTED pi/6={m1.acc_pi6:.3f} pi/18={m1.acc_pi18:.3f} ratio@0.8={ratio1:.4f} (x{ratio1/max(ratio0,1e-9):.1f}) proto-cos mean {cos_t.mean():.3f} min {cos_t.min():.3f}', flush=True)
