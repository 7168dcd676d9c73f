import init, { score_table, preview_prompt, cooccurrence, techniques } from "./pkg/manipscan_wasm_demo.js";

const $ = (id) => document.getElementById(id);
const fmt = (x) => x.toFixed(2);

function el(tag, text, cls) {
  const e = document.createElement(tag);
  if (text !== undefined) e.textContent = text;
  if (cls) e.className = cls;
  return e;
}

function table(header, rows) {
  const t = el("table");
  const head = el("tr");
  header.forEach((h) => head.appendChild(el("th", h)));
  t.appendChild(head);
  rows.forEach(({ cells, cls }) => {
    const tr = el("tr", undefined, cls);
    cells.forEach((c) => tr.appendChild(el("td", c)));
    t.appendChild(tr);
  });
  return t;
}

// Exports throw a plain string on bad input.
function guarded(out, f) {
  out.replaceChildren();
  try {
    f();
  } catch (e) {
    out.replaceChildren(el("p", String(e), "error"));
  }
}

function onScore() {
  const out = $("score-out");
  guarded(out, () => {
    const minSupport = Number($("min-support").value) || 0;
    const r = JSON.parse(score_table($("csv").value, $("scoring").value, minSupport));
    const rows = r.rows.map((row) => ({
      cls: row.qualifies ? "" : "low",
      cells: [row.technique, row.tp, row.tn, row.fp, row.fn, row.refusals, row.support,
        fmt(row.accuracy), fmt(row.recall), fmt(row.precision), fmt(row.f1)],
    }));
    out.appendChild(table(["technique", "tp", "tn", "fp", "fn", "refusals", "support",
      "accuracy", "recall", "precision", "f1"], rows));
    const awa = r.weighted_accuracy === null ? "n/a (no row meets the support floor)"
      : r.weighted_accuracy.toFixed(4);
    out.appendChild(el("p", `Support-weighted accuracy: ${awa}`));
  });
}

function onPreview() {
  const out = $("prompt-out");
  guarded(out, () => {
    const r = JSON.parse(preview_prompt($("technique").value, $("examples").value, $("query").value));
    out.appendChild(el("p", `${r.examples} example(s), digest ${r.digest.slice(0, 16)}`));
    out.appendChild(el("pre", r.prompt));
  });
}

function onCooc() {
  const out = $("cooc-out");
  guarded(out, () => {
    const m = JSON.parse(cooccurrence($("labels").value));
    const n = m.columns.length;
    const rows = m.rows.map((name, i) => ({ cells: [name, ...m.cells.slice(i * n, (i + 1) * n).map(fmt)] }));
    out.appendChild(table(["", ...m.columns], rows));
  });
}

await init();
for (const t of JSON.parse(techniques())) {
  const o = el("option", t.name);
  o.value = t.id;
  o.title = t.definition;
  $("technique").appendChild(o);
}
$("technique").value = "time_pressure";
$("score").addEventListener("click", onScore);
$("preview").addEventListener("click", onPreview);
$("cooc").addEventListener("click", onCooc);
