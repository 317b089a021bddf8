import init, { reconstruct, KMeansDemo, assign_partitions, moved_partitions } from "./pkg/pilotstream_web.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);
const PALETTE = ["#e6194b", "#3cb44b", "#4363d8", "#f58231", "#911eb4", "#46f0f0", "#f032e6", "#bcf60c", "#008080", "#9a6324"];

function show(el, text, isError = false) {
  el.textContent = text;
  el.className = isError ? "out err" : "out";
}

// Gray-scale image of a row-major array, stretched to the canvas.
function paint(canvas, values, cols, rows) {
  let lo = Infinity, hi = -Infinity;
  for (const v of values) { lo = Math.min(lo, v); hi = Math.max(hi, v); }
  const span = hi > lo ? hi - lo : 1;
  const img = new ImageData(cols, rows);
  values.forEach((v, i) => {
    const g = Math.round(255 * (v - lo) / span);
    img.data.set([g, g, g, 255], 4 * i);
  });
  const tmp = new OffscreenCanvas(cols, rows);
  tmp.getContext("2d").putImageData(img, 0, 0);
  const ctx = canvas.getContext("2d");
  ctx.imageSmoothingEnabled = false;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  ctx.drawImage(tmp, 0, 0, canvas.width, canvas.height);
}

function runReconstruction() {
  const t0 = performance.now();
  try {
    const r = reconstruct(num("r-size"), num("r-angles"), $("r-alg").value, num("r-iter"));
    const ms = performance.now() - t0;
    paint($("r-phantom"), r.phantom(), r.size, r.size);
    paint($("r-sino"), r.sinogram(), r.bins, r.angles);
    paint($("r-image"), r.image(), r.size, r.size);
    show($("r-out"), `phantom | sinogram (${r.angles} x ${r.bins}) | reconstruction: RMSE ${r.rmse.toFixed(4)} in ${ms.toFixed(0)} ms`);
    r.free();
  } catch (e) {
    show($("r-out"), String(e), true);
  }
}

let demo = null;
let timer = null;

function resetKMeans() {
  stopPlay();
  if (demo) demo.free();
  try {
    demo = new KMeansDemo(num("k-k"), num("k-c"), num("k-n"), num("k-decay"), 7n);
    drawKMeans();
    show($("k-out"), "model unseeded; the first window seeds it");
  } catch (e) {
    demo = null;
    show($("k-out"), String(e), true);
  }
}

function drawKMeans() {
  const canvas = $("k-plot");
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const extent = 13;
  const px = (x) => (x + extent) / (2 * extent) * canvas.width;
  const py = (y) => canvas.height - (y + extent) / (2 * extent) * canvas.height;
  const pts = demo.points(), asg = demo.assignments();
  for (let i = 0; i < asg.length; i++) {
    ctx.fillStyle = PALETTE[asg[i] % PALETTE.length];
    ctx.fillRect(px(pts[2 * i]) - 1, py(pts[2 * i + 1]) - 1, 2, 2);
  }
  const cross = (x, y, color, size) => {
    ctx.strokeStyle = color;
    ctx.lineWidth = 2;
    ctx.beginPath();
    ctx.moveTo(px(x) - size, py(y)); ctx.lineTo(px(x) + size, py(y));
    ctx.moveTo(px(x), py(y) - size); ctx.lineTo(px(x), py(y) + size);
    ctx.stroke();
  };
  const truth = demo.true_centroids();
  for (let i = 0; i < truth.length; i += 2) cross(truth[i], truth[i + 1], "#999", 6);
  const model = demo.centroids();
  for (let i = 0; i < model.length; i += 2) cross(model[i], model[i + 1], "#000", 9);
}

function stepKMeans() {
  if (!demo) resetKMeans();
  if (!demo) return;
  try {
    const cost = demo.step();
    drawKMeans();
    show($("k-out"), `window ${demo.windows}: cost ${cost.toFixed(1)} (${(cost / Math.max(1, demo.points().length / 2)).toFixed(3)} per point); gray = true centres, black = model`);
  } catch (e) {
    stopPlay();
    show($("k-out"), String(e), true);
  }
}

function stopPlay() {
  if (timer) clearInterval(timer);
  timer = null;
  $("k-play").textContent = "Play";
}

function togglePlay() {
  if (timer) return stopPlay();
  timer = setInterval(stepKMeans, 400);
  $("k-play").textContent = "Pause";
}

function runRebalance() {
  const parts = num("p-parts"), before = num("p-before"), after = num("p-after");
  if (!(parts >= 1 && before >= 1 && after >= 1)) {
    show($("p-out"), "all counts must be at least 1", true);
    return;
  }
  const a = assign_partitions(parts, before), b = assign_partitions(parts, after);
  const row = (label, xs, other) =>
    `<tr><th>${label}</th>${Array.from(xs, (w, p) =>
      `<td style="background:${PALETTE[w % PALETTE.length]}33;${other && other[p] !== w ? "font-weight:bold" : ""}">w${w}</td>`).join("")}</tr>`;
  const header = `<tr><th>partition</th>${Array.from(a, (_, p) => `<td>${p}</td>`).join("")}</tr>`;
  $("p-table").innerHTML = `<table class="parts">${header}${row(`${before} workers`, a)}${row(`${after} workers`, b, a)}</table>`;
  show($("p-out"), `${moved_partitions(parts, before, after)} of ${parts} partitions change worker`);
}

await init();
$("r-run").onclick = runReconstruction;
$("k-reset").onclick = resetKMeans;
$("k-step").onclick = stepKMeans;
$("k-play").onclick = togglePlay;
$("p-run").onclick = runRebalance;
runReconstruction();
resetKMeans();
runRebalance();
