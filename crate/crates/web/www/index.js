import init, { softArgmaxProbe, occlusionProbe, SceneDemo } from "./pkg/voxtrack_web.js";

const $ = (id) => document.getElementById(id);
const COLORS = ["#e6194b", "#3cb44b", "#4363d8", "#f58231", "#911eb4", "#42d4f4", "#f032e6", "#bfef45"];
const color = (id) => COLORS[id % COLORS.length];

function heat(v) {
  const t = Math.max(0, Math.min(1, v));
  return `rgb(${Math.round(255 * Math.min(1, 2 * t))},${Math.round(255 * Math.max(0, 2 * t - 1))},${Math.round(80 * (1 - t))})`;
}

function floorPlan(canvas, area) {
  const [x0, y0, x1, y1] = area;
  const s = Math.min(canvas.width / (x1 - x0), canvas.height / (y1 - y0));
  return {
    toPx: ([x, y]) => [(x - x0) * s, canvas.height - (y - y0) * s],
    toMm: (px, py) => [x0 + px / s, y0 + (canvas.height - py) / s],
  };
}

// soft-argmax

function updateSoftArgmax() {
  const ids = ["sa-x", "sa-y", "sa-z", "sa-sigma", "sa-r"];
  const v = ids.map((id) => Number($(id).value));
  ids.forEach((id, i) => ($(id + "-v").textContent = v[i]));
  const canvas = $("sa-canvas");
  const ctx = canvas.getContext("2d");
  try {
    const r = JSON.parse(softArgmaxProbe(...v));
    $("sa-est").textContent = r.estimate.map((c) => c.toFixed(1)).join(", ") + " mm";
    $("sa-err").textContent = r.error_mm.toFixed(3) + " mm";
    const n = r.slice.length;
    const max = Math.max(1e-12, ...r.slice.flat());
    const cell = canvas.width / n;
    for (let x = 0; x < n; x++) {
      for (let y = 0; y < n; y++) {
        ctx.fillStyle = heat(r.slice[x][y] / max);
        ctx.fillRect(x * cell, canvas.height - (y + 1) * cell, cell, cell);
      }
    }
  } catch (e) {
    $("sa-err").innerHTML = `<span class="err">${e}</span>`;
  }
}

// occlusion

const occ = { occluder: [6000, 5000], target: [5000, 5000] };

function updateOcclusion() {
  const cutoff = Number($("oc-cut").value);
  $("oc-cut-v").textContent = cutoff.toFixed(2);
  const canvas = $("oc-canvas");
  const ctx = canvas.getContext("2d");
  let r;
  try {
    r = JSON.parse(occlusionProbe(...occ.occluder, ...occ.target, cutoff));
  } catch (e) {
    $("oc-table").innerHTML = `<tr><td class="err">${e}</td></tr>`;
    return;
  }
  const xs = r.cameras.map((c) => c[0]).concat([0, 10000]);
  const ys = r.cameras.map((c) => c[1]).concat([0, 10000]);
  const plan = floorPlan(canvas, [Math.min(...xs) - 300, Math.min(...ys) - 300, Math.max(...xs) + 300, Math.max(...ys) + 300]);
  canvas.plan = plan;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  r.cameras.forEach((c, i) => {
    const [cx, cy] = plan.toPx(c);
    const [tx, ty] = plan.toPx(occ.target);
    ctx.strokeStyle = `rgba(0,0,0,${0.15 + 0.85 * r.linear[i]})`;
    ctx.beginPath();
    ctx.moveTo(cx, cy);
    ctx.lineTo(tx, ty);
    ctx.stroke();
    ctx.fillStyle = "#333";
    ctx.fillRect(cx - 5, cy - 5, 10, 10);
    ctx.fillText(`cam ${i}`, cx + 7, cy - 7);
  });
  for (const [name, fill] of [["target", "#4363d8"], ["occluder", "#e6194b"]]) {
    const [x, y] = plan.toPx(occ[name]);
    ctx.fillStyle = fill;
    ctx.beginPath();
    ctx.arc(x, y, 7, 0, 2 * Math.PI);
    ctx.fill();
  }
  const fmt = (v) => v.toFixed(3);
  $("oc-table").innerHTML =
    "<tr><th>view</th><th>occluded</th><th>linear</th><th>hard</th><th>off</th></tr>" +
    r.fractions
      .map((f, i) => `<tr><td>${i}</td><td>${fmt(f)}</td><td>${fmt(r.linear[i])}</td><td>${fmt(r.hard[i])}</td><td>${fmt(r.off[i])}</td></tr>`)
      .join("");
}

// scene

let running = null;

function runScene() {
  if (running) cancelAnimationFrame(running.raf);
  const canvas = $("sc-canvas");
  const ctx = canvas.getContext("2d");
  let demo;
  try {
    demo = new SceneDemo(BigInt($("sc-seed").value), Number($("sc-persons").value), Number($("sc-frames").value));
  } catch (e) {
    $("sc-frame").innerHTML = `<span class="err">${e}</span>`;
    return;
  }
  const layout = JSON.parse(demo.layout());
  const plan = floorPlan(canvas, layout.area);
  const trails = new Map();
  running = { raf: 0 };
  const tick = () => {
    if (demo.done()) {
      demo.free();
      running = null;
      return;
    }
    const f = JSON.parse(demo.step());
    $("sc-frame").textContent = f.frame;
    for (const t of f.tracks) {
      if (!trails.has(t.id)) trails.set(t.id, []);
      trails.get(t.id).push(plan.toPx(t.xy));
    }
    ctx.clearRect(0, 0, canvas.width, canvas.height);
    for (const [id, pts] of trails) {
      ctx.strokeStyle = color(id);
      ctx.beginPath();
      pts.forEach(([x, y], i) => (i ? ctx.lineTo(x, y) : ctx.moveTo(x, y)));
      ctx.stroke();
    }
    for (const p of f.persons) {
      const [x, y] = plan.toPx(p.xy);
      ctx.strokeStyle = "#555";
      ctx.beginPath();
      ctx.arc(x, y, 9, 0, 2 * Math.PI);
      ctx.stroke();
    }
    for (const t of f.tracks) {
      const [x, y] = plan.toPx(t.xy);
      ctx.fillStyle = color(t.id);
      ctx.beginPath();
      ctx.arc(x, y, 4, 0, 2 * Math.PI);
      ctx.fill();
      ctx.fillText(String(t.id), x + 6, y - 6);
    }
    running.raf = requestAnimationFrame(tick);
  };
  tick();
}

await init();
$("status").textContent = "";
for (const id of ["sa-x", "sa-y", "sa-z", "sa-sigma", "sa-r"]) $(id).addEventListener("input", updateSoftArgmax);
$("oc-cut").addEventListener("input", updateOcclusion);
$("oc-canvas").addEventListener("click", (e) => {
  const mode = document.querySelector("input[name=oc-mode]:checked").value;
  const rect = e.target.getBoundingClientRect();
  occ[mode] = e.target.plan.toMm(e.clientX - rect.left, e.clientY - rect.top);
  updateOcclusion();
});
for (const r of document.querySelectorAll("input[name=oc-mode]")) {
  r.addEventListener("change", () => ($("oc-mode-name").textContent = r.value));
}
$("sc-run").addEventListener("click", runScene);
updateSoftArgmax();
updateOcclusion();
