import init, { Scene, receptive_field } from "./pkg/nestseg_web.js";

const $ = (id) => document.getElementById(id);
const SCENE_H = 256;
const SCENE_W = 320;
const RF_SIZE = 81;
const RF_SCALE = 4;

let scene = null;

function paint(canvas, width, height, rgba, scale = 1) {
  canvas.width = width * scale;
  canvas.height = height * scale;
  const ctx = canvas.getContext("2d");
  const data = new ImageData(new Uint8ClampedArray(rgba), width, height);
  if (scale === 1) {
    ctx.putImageData(data, 0, 0);
    return;
  }
  const off = new OffscreenCanvas(width, height);
  off.getContext("2d").putImageData(data, 0, 0);
  ctx.imageSmoothingEnabled = false;
  ctx.drawImage(off, 0, 0, width * scale, height * scale);
}

function showError(e) {
  $("error").textContent = e ? String(e.message ?? e) : "";
}

const pct = (v) => (v === null ? "skipped" : (100 * v).toFixed(2));

function regenerate() {
  try {
    scene?.free();
    scene = new Scene($("task").value, Number($("seed").value), SCENE_H, SCENE_W);
    paint($("image"), scene.width(), scene.height(), scene.image_rgba());
    paint($("mask"), scene.width(), scene.height(), scene.mask_rgba());
    $("legend").innerHTML = JSON.parse(scene.legend())
      .map((c) => `<span><i class="swatch" style="background:${c.color}"></i>${c.class} ${c.name}</span>`)
      .join("");
    showError(null);
    explore();
  } catch (e) {
    showError(e);
  }
}

function explore() {
  if (!scene) return;
  try {
    const result = scene.explore(Number($("dx").value), Number($("dy").value), Number($("noise").value), 1);
    paint($("overlay"), scene.width(), scene.height(), result.overlay());
    const report = JSON.parse(result.report());
    result.free();
    $("scores").textContent = `image IoU ${pct(report.iou)}%, Dice ${pct(report.dice)}%`;
    const rows = report.classes
      .map((c) => `<tr><td>${c.class} ${c.name}</td><td>${c.tp}</td><td>${c.fp}</td><td>${c.fn}</td><td>${pct(c.iou)}</td><td>${pct(c.dice)}</td></tr>`)
      .join("");
    $("classes").innerHTML = `<tr><th>class</th><th>TP</th><th>FP</th><th>FN</th><th>IoU %</th><th>Dice %</th></tr>${rows}`;
  } catch (e) {
    showError(e);
  }
}

function drawFootprint() {
  try {
    const fp = receptive_field(Number($("kernel").value), $("rates").value, RF_SIZE);
    paint($("rf"), fp.size(), fp.size(), fp.pixels(), RF_SCALE);
    const s = JSON.parse(fp.summary());
    fp.free();
    $("rf-summary").textContent =
      `analytic width ${s.analytic}, measured extent ${s.extent}, ` +
      `${s.reached} cells reached (${(100 * s.coverage).toFixed(1)}% of the bounding square)`;
    showError(null);
  } catch (e) {
    showError(e);
  }
}

await init();
$("regen").addEventListener("click", regenerate);
$("task").addEventListener("change", regenerate);
for (const id of ["dx", "dy", "noise"]) $(id).addEventListener("input", explore);
$("rf-go").addEventListener("click", drawFootprint);
regenerate();
drawFootprint();
