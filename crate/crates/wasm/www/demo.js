import init, { Demo } from "./pkg/voidkit_wasm.js";

const $ = (id) => document.getElementById(id);
let demo;
let size;
let stopRequested = false;

function paint(id, rgba) {
  const canvas = $(id);
  canvas.width = size;
  canvas.height = size;
  const img = new ImageData(new Uint8ClampedArray(rgba), size, size);
  canvas.getContext("2d").putImageData(img, 0, 0);
}

function fail(e) {
  $("status").textContent = String(e);
}

function showSource() {
  paint("source", demo.source_rgba());
  for (const kind of ["anchor", "semantic", "cam"]) {
    paint(`mask-${kind}`, demo.mask_rgba(kind));
  }
  $("mask-info").textContent = `${demo.kept_anchors()} anchors above the confidence threshold`;
  $("log").textContent = "iteration  l_loc  l_id  l_attn  l_feat  l_total";
  showProtected();
}

function showProtected() {
  paint("protected", demo.protected_rgba());
  paint("difference", demo.difference_rgba(8));
  $("run-info").textContent =
    `L∞ = ${demo.linf_bytes()}/255, identity similarity to source = ${demo.identity_similarity().toFixed(4)}`;
  explore();
}

function explore() {
  const q = Number($("q").value);
  const gamma = Number($("gamma").value);
  const sigma = Number($("sigma").value);
  $("q-val").textContent = q.toFixed(2);
  $("gamma-val").textContent = gamma.toFixed(2);
  $("sigma-val").textContent = sigma.toFixed(1);
  try {
    const view = demo.explore(q, gamma, sigma);
    paint("map-s", view.similarity());
    paint("map-m", view.binary());
    paint("map-p", view.smooth());
    $("map-info").textContent =
      `fraction of ones ${view.fraction_ones().toFixed(3)}, P in [${view.p_min().toFixed(3)}, ${view.p_max().toFixed(3)}]`;
    view.free();
  } catch (e) {
    fail(e);
  }
}

function loadFile(file) {
  const url = URL.createObjectURL(file);
  const img = new Image();
  img.onload = () => {
    const canvas = document.createElement("canvas");
    canvas.width = size;
    canvas.height = size;
    const ctx = canvas.getContext("2d");
    ctx.drawImage(img, 0, 0, size, size);
    URL.revokeObjectURL(url);
    try {
      demo.load_rgba(new Uint8Array(ctx.getImageData(0, 0, size, size).data.buffer));
      showSource();
    } catch (e) {
      fail(e);
    }
  };
  img.src = url;
}

function runLoop() {
  if (stopRequested || !demo.running()) {
    $("run").disabled = false;
    return;
  }
  try {
    const [it, ...losses] = demo.step();
    $("log").textContent += `\n${String(it).padStart(9)}  ${losses.map((v) => v.toFixed(4)).join("  ")}`;
    $("log").scrollTop = $("log").scrollHeight;
    showProtected();
  } catch (e) {
    fail(e);
    $("run").disabled = false;
    return;
  }
  setTimeout(runLoop, 0);
}

function startRun() {
  try {
    demo.start(
      Number($("epsilon").value),
      Number($("alpha").value),
      Number($("iters").value),
      $("adaptive").checked,
      Number($("run-seed").value),
    );
  } catch (e) {
    fail(e);
    return;
  }
  $("status").textContent = "";
  $("log").textContent = "iteration  l_loc  l_id  l_attn  l_feat  l_total";
  $("run").disabled = true;
  stopRequested = false;
  runLoop();
}

async function main() {
  await init();
  demo = new Demo(0, Number($("face-seed").value));
  size = demo.size();
  $("status").textContent = "";
  showSource();
  $("load-face").onclick = () => {
    try {
      demo.load_synthetic(Number($("face-seed").value));
      showSource();
    } catch (e) {
      fail(e);
    }
  };
  $("upload").onchange = (ev) => ev.target.files[0] && loadFile(ev.target.files[0]);
  $("run").onclick = startRun;
  $("stop").onclick = () => (stopRequested = true);
  for (const id of ["q", "gamma", "sigma"]) $(id).oninput = explore;
}

main().catch(fail);
